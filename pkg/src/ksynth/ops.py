"""Differentiable primitives on 5-D tensors.

Convolutions are same-padded with zeros and never stride, so every op
preserves the (N, C, T, H, W) shape.  Max pooling pads with -inf.  The
default convolution path accumulates one GEMM per kernel offset; a naive
loop path (``method="naive"``) exists purely as a correctness oracle.

ReLU uses the subgradient 1 at exactly zero.  A zero-initialised fusion
layer produces exact zeros in front of the intermediate ReLU, and the
0-subgradient convention would silence every gradient behind it; choosing
1 keeps such blocks trainable without changing the function value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import GradTape, Param, Tensor5, Tracked, active_tape, result_of

# ---------------------------------------------------------------------------
# raw convolution core (plain ndarrays, no tape)
# ---------------------------------------------------------------------------


def _check_conv_args(x_shape, w_shape, groups):
    n, c_in, t, h, w = x_shape
    c_out, c_in_g, kt, kh, kw = w_shape
    for k in (kt, kh, kw):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel sizes must be odd and >= 1, got {(kt, kh, kw)}")
    if c_in % groups or c_out % groups:
        raise DimensionError(
            f"channel counts ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise DimensionError(
            f"kernel expects {c_in_g} input channels per group, tensor provides {c_in // groups}")


def _pad5(x: np.ndarray, pt: int, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if pt == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                  constant_values=value)


def _offsets(kt, kh, kw):
    return [(it, ih, iw) for it in range(kt) for ih in range(kh) for iw in range(kw)]


def _pad_cf(xt: np.ndarray, pt: int, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the trailing (t, h, w) axes of a channels-first (c, n, t, h, w)
    array."""
    if pt == 0 and ph == 0 and pw == 0:
        return xt
    c, n, t, h, w = xt.shape
    out = np.zeros((c, n, t + 2 * pt, h + 2 * ph, w + 2 * pw))
    out[:, :, pt:pt + t, ph:ph + h, pw:pw + w] = xt
    return out


def _im2col_cf(xpt: np.ndarray, k: tuple, d: tuple, out_dims: tuple) -> np.ndarray:
    """Gather offsets of a padded channels-first array into (c*kk, n*t*h*w)."""
    c, n = xpt.shape[:2]
    t, h, w = out_dims
    kt, kh, kw = k
    dt, dh, dw = d
    col = np.empty((c, kt * kh * kw, n, t, h, w))
    for i, (it, ih, iw) in enumerate(_offsets(kt, kh, kw)):
        col[:, i] = xpt[:, :, it * dt:it * dt + t, ih * dh:ih * dh + h,
                        iw * dw:iw * dw + w]
    return col.reshape(c * kt * kh * kw, n * t * h * w)


def conv5d_raw(x: np.ndarray, w: np.ndarray, groups: int = 1,
               dilation: tuple[int, int, int] = (1, 1, 1)) -> np.ndarray:
    """Grouped, dilated, same-padded 3-D convolution on a (N,C,T,H,W) array.

    ``w`` has shape (C_out, C_in/groups, kt, kh, kw).  Output spatial and
    temporal extents equal the input's.  Internally channels-first so every
    group is one large 2-D GEMM over an im2col gather.
    """
    _check_conv_args(x.shape, w.shape, groups)
    n, c_in, t, h, wd = x.shape
    c_out, c_in_g, kt, kh, kw = w.shape
    dt, dh, dw = dilation
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    xpt = _pad_cf(xt, dt * (kt - 1) // 2, dh * (kh - 1) // 2, dw * (kw - 1) // 2)
    c_out_g = c_out // groups
    kk = kt * kh * kw
    out_t = np.empty((c_out, n, t, h, wd))
    for g in range(groups):
        col = _im2col_cf(xpt[g * c_in_g:(g + 1) * c_in_g],
                         (kt, kh, kw), dilation, (t, h, wd))
        w2d = w[g * c_out_g:(g + 1) * c_out_g].reshape(c_out_g, c_in_g * kk)
        np.matmul(w2d, col, out=out_t[g * c_out_g:(g + 1) * c_out_g].reshape(
            c_out_g, n * t * h * wd))
    return np.ascontiguousarray(out_t.transpose(1, 0, 2, 3, 4))


def conv5d_naive(x: np.ndarray, w: np.ndarray, groups: int = 1,
                 dilation: tuple[int, int, int] = (1, 1, 1)) -> np.ndarray:
    """Direct-loop reference convolution; slow, used to validate the fast path."""
    _check_conv_args(x.shape, w.shape, groups)
    n, c_in, t, h, wd = x.shape
    c_out, c_in_g, kt, kh, kw = w.shape
    dt, dh, dw = dilation
    pt, ph, pw = dt * (kt - 1) // 2, dh * (kh - 1) // 2, dw * (kw - 1) // 2
    c_out_g = c_out // groups
    out = np.zeros((n, c_out, t, h, wd))
    for ni in range(n):
        for co in range(c_out):
            g = co // c_out_g
            for ti in range(t):
                for hi in range(h):
                    for wi in range(wd):
                        acc = 0.0
                        for ci in range(c_in_g):
                            for it in range(kt):
                                for ih in range(kh):
                                    for iw in range(kw):
                                        tt = ti + it * dt - pt
                                        hh = hi + ih * dh - ph
                                        ww = wi + iw * dw - pw
                                        if 0 <= tt < t and 0 <= hh < h and 0 <= ww < wd:
                                            acc += (w[co, ci, it, ih, iw] *
                                                    x[ni, g * c_in_g + ci, tt, hh, ww])
                        out[ni, co, ti, hi, wi] = acc
    return out


def _conv5d_backward(g_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                     groups: int, dilation: tuple[int, int, int]):
    """Gradients (dx, dw) of conv5d_raw; the im2col gather is recomputed to
    keep the saved-state footprint at one input reference per conv."""
    n, c_in, t, h, wd = x.shape
    c_out, c_in_g, kt, kh, kw = w.shape
    dt, dh, dw_ = dilation
    pt, ph, pw = dt * (kt - 1) // 2, dh * (kh - 1) // 2, dw_ * (kw - 1) // 2
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    xpt = _pad_cf(xt, pt, ph, pw)
    got = np.ascontiguousarray(g_out.transpose(1, 0, 2, 3, 4))
    gxpt = np.zeros_like(xpt)
    gw = np.empty_like(w)
    c_out_g = c_out // groups
    kk = kt * kh * kw
    p = n * t * h * wd
    for g in range(groups):
        w2d = w[g * c_out_g:(g + 1) * c_out_g].reshape(c_out_g, c_in_g * kk)
        go2 = got[g * c_out_g:(g + 1) * c_out_g].reshape(c_out_g, p)
        col = _im2col_cf(xpt[g * c_in_g:(g + 1) * c_in_g],
                         (kt, kh, kw), dilation, (t, h, wd))
        # dW = gout @ col^T, dCol = w^T @ gout: two plain GEMMs
        gw[g * c_out_g:(g + 1) * c_out_g] = (go2 @ col.T).reshape(
            c_out_g, c_in_g, kt, kh, kw)
        gcol = (w2d.T @ go2).reshape(c_in_g, kk, n, t, h, wd)
        gxg = gxpt[g * c_in_g:(g + 1) * c_in_g]
        for i, (it, ih, iw) in enumerate(_offsets(kt, kh, kw)):
            gxg[:, :, it * dt:it * dt + t, ih * dh:ih * dh + h,
                iw * dw_:iw * dw_ + wd] += gcol[:, i]
    gxt = gxpt[:, :, pt:pt + t, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4)), gw


# ---------------------------------------------------------------------------
# kernel descriptors
# ---------------------------------------------------------------------------


def _kernel_param(c_out: int, c_in_g: int, shape: tuple[int, int, int], rng,
                  name: str, scale: float | None = None) -> Param:
    kt, kh, kw = shape
    fan_in = c_in_g * kt * kh * kw
    s = scale if scale is not None else float(np.sqrt(2.0 / fan_in))
    return Param(rng.normal(0.0, s, size=(c_out, c_in_g, kt, kh, kw)), name=name)


@dataclass
class SpatialKernel:
    """k x k spatial kernel (temporal extent exactly 1), optionally dilated."""

    size: int
    dilation: int = 1
    groups: int = 1
    weights: Param | None = None

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"spatial kernel size must be odd, got {self.size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.weights is not None:
            c_out, c_in_g, kt, kh, kw = self.weights.data.shape
            if kt != 1 or kh != self.size or kw != self.size:
                raise DimensionError(
                    f"weights shape {self.weights.data.shape} does not match a "
                    f"{self.size}x{self.size}x1 spatial kernel")

    @classmethod
    def create(cls, c_in: int, c_out: int, size: int, rng, dilation: int = 1,
               groups: int = 1, name: str = "spatial") -> "SpatialKernel":
        w = _kernel_param(c_out, c_in // groups, (1, size, size), rng, name)
        return cls(size=size, dilation=dilation, groups=groups, weights=w)

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.size - 1) + 1


@dataclass
class TemporalKernel:
    """1 x 1 spatial, length-k temporal kernel, optionally dilated."""

    size: int
    dilation: int = 1
    groups: int = 1
    weights: Param | None = None

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"temporal kernel size must be odd, got {self.size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.weights is not None:
            c_out, c_in_g, kt, kh, kw = self.weights.data.shape
            if kh != 1 or kw != 1 or kt != self.size:
                raise DimensionError(
                    f"weights shape {self.weights.data.shape} does not match a "
                    f"1x1x{self.size} temporal kernel")

    @classmethod
    def create(cls, c_in: int, c_out: int, size: int, rng, dilation: int = 1,
               groups: int = 1, name: str = "temporal") -> "TemporalKernel":
        w = _kernel_param(c_out, c_in // groups, (size, 1, 1), rng, name)
        return cls(size=size, dilation=dilation, groups=groups, weights=w)

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.size - 1) + 1


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------


def conv5d(x: Tensor5, weights: Param, groups: int = 1,
           dilation: tuple[int, int, int] = (1, 1, 1), method: str = "fast") -> Tensor5:
    """General grouped convolution as a tape op (used by the public wrappers)."""
    if method == "fast":
        out = conv5d_raw(x.data, weights.data, groups, dilation)
    elif method == "naive":
        out = conv5d_naive(x.data, weights.data, groups, dilation)
    else:
        raise UsageError(f"unknown conv method {method!r}")
    xd, wd = x.data, weights.data

    def bwd(g):
        gx, gw = _conv5d_backward(g, xd, wd, groups, dilation)
        return gx, gw

    return result_of(out, (x, weights), bwd)


def conv_spatial(x: Tensor5, kernel: SpatialKernel, method: str = "fast") -> Tensor5:
    """Same-padded spatial convolution; each frame depends only on itself."""
    if kernel.weights is None:
        raise UsageError("kernel has no weights")
    return conv5d(x, kernel.weights, groups=kernel.groups,
                  dilation=(1, kernel.dilation, kernel.dilation), method=method)


def conv_temporal(x: Tensor5, kernel: TemporalKernel, method: str = "fast") -> Tensor5:
    """Same-padded temporal convolution; no spatial mixing."""
    if kernel.weights is None:
        raise UsageError("kernel has no weights")
    return conv5d(x, kernel.weights, groups=kernel.groups,
                  dilation=(kernel.dilation, 1, 1), method=method)


def maxpool3d(x: Tensor5, window: tuple[int, int, int]) -> Tensor5:
    """Stride-1 max pooling, same shape, -inf padding semantics."""
    kt, kh, kw = window
    for k in (kt, kh, kw):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"pool window sizes must be odd, got {window}")
    n, c, t, h, w = x.shape
    pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = _pad5(x.data, pt, ph, pw, value=-np.inf)
    out = np.full((n, c, t, h, w), -np.inf)
    for it in range(kt):
        for ih in range(kh):
            for iw in range(kw):
                np.maximum(out, xp[:, :, it:it + t, ih:ih + h, iw:iw + w], out=out)
    xd = x.data

    def bwd(g):
        # Route each output's gradient to the first window offset attaining
        # the max (fixed offset order => deterministic on ties).
        gxp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw))
        taken = np.zeros(out.shape, dtype=bool)
        xpad = _pad5(xd, pt, ph, pw, value=-np.inf)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    sl = xpad[:, :, it:it + t, ih:ih + h, iw:iw + w]
                    hit = (sl == out) & ~taken
                    gxp[:, :, it:it + t, ih:ih + h, iw:iw + w] += np.where(hit, g, 0.0)
                    taken |= hit
        return (np.ascontiguousarray(
            gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]),)

    return result_of(out, (x,), bwd)


def global_avg_pool(x: Tensor5) -> Tracked:
    """Mean over (T, H, W); returns a per-channel (N, C) value."""
    n, c, t, h, w = x.shape
    if t * h * w == 0 or n == 0:
        raise DimensionError("global_avg_pool needs a nonempty tensor")
    out = x.data.mean(axis=(2, 3, 4))
    scale = 1.0 / (t * h * w)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None, None] * scale, x.shape).copy(),)

    return result_of(out, (x,), bwd, cls=Tracked)


def avgpool_hw2(x: Tensor5) -> Tensor5:
    """2x2 spatial mean with stride 2 (downsampling between backbone stages)."""
    n, c, t, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"spatial dims must be even to halve, got {h}x{w}")
    v = x.data.reshape(n, c, t, h // 2, 2, w // 2, 2)
    out = v.mean(axis=(4, 6))

    def bwd(g):
        gx = np.empty((n, c, t, h // 2, 2, w // 2, 2))
        gx[...] = (g * 0.25)[:, :, :, :, None, :, None]
        return (gx.reshape(n, c, t, h, w),)

    return result_of(out, (x,), bwd)


def add(a: Tensor5, b: Tensor5) -> Tensor5:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return result_of(a.data + b.data, (a, b), lambda g: (g, g))


def channelwise_mul(x: Tensor5, weight: Tracked) -> Tensor5:
    """Multiply every channel by its scalar weight (weight shape (C,))."""
    wd = weight.data
    if wd.shape != (x.shape[1],):
        raise DimensionError(
            f"channel weights shape {wd.shape} does not match C={x.shape[1]}")
    out = x.data * wd[None, :, None, None, None]
    xd = x.data

    def bwd(g):
        return (g * wd[None, :, None, None, None],
                np.einsum("ncthw,ncthw->c", g, xd))

    return result_of(out, (x, weight), bwd)


def relu(x: Tracked) -> Tracked:
    out = np.maximum(x.data, 0.0)
    mask = x.data >= 0.0  # subgradient 1 at 0, see module docstring

    def bwd(g):
        return (np.where(mask, g, 0.0),)

    return result_of(out, (x,), bwd, cls=Tensor5 if isinstance(x, Tensor5) else Tracked)


def concat_channels(parts) -> Tensor5:
    parts = list(parts)
    if not parts:
        raise UsageError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts:
        s = p.shape
        if (s[0],) + s[2:] != (ref[0],) + ref[2:]:
            raise DimensionError("concat_channels: non-channel dims differ")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    edges = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.ascontiguousarray(g[:, edges[i]:edges[i + 1]])
                     for i in range(len(sizes)))

    return result_of(out, tuple(parts), bwd)


def narrow_channels(x: Tensor5, start: int, stop: int) -> Tensor5:
    """Channel slice [start, stop) as its own tensor."""
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise DimensionError(f"bad channel slice [{start}:{stop}) for C={c}")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return result_of(out, (x,), bwd)


def split_channels(x: Tensor5, proportion) -> tuple[Tensor5, Tensor5]:
    """Split channels into (first p*C, rest).  p*C must be a whole number."""
    c = x.shape[1]
    k = proportion * c
    if abs(k - round(k)) > 1e-9 or not (0 < round(k) <= c):
        raise ConfigError(f"proportion {proportion} of C={c} channels is not integral")
    k = int(round(k))
    front = narrow_channels(x, 0, k)
    if k == c:
        # Degenerate split: empty remainder is not representable, reuse front.
        rest = narrow_channels(x, 0, c)
        return front, rest
    return front, narrow_channels(x, k, c)


def split_groups(x: Tensor5, g: int) -> list[Tensor5]:
    c = x.shape[1]
    if c % g:
        raise DimensionError(f"C={c} not divisible by {g} groups")
    w = c // g
    return [narrow_channels(x, i * w, (i + 1) * w) for i in range(g)]


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


class BatchNorm:
    """Per-channel batch normalisation over (N, T, H, W).

    Train mode normalises with batch statistics and updates the running
    estimates; eval mode applies the running estimates.  eps=1e-5,
    momentum=0.1.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, name: str = "bn"):
        self.channels = channels
        self.gamma = Param(np.ones(channels), name=f"{name}.gamma")
        self.beta = Param(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor5, train: bool) -> Tensor5:
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"BatchNorm over {self.channels} channels got C={x.shape[1]}")
        g, b = self.gamma, self.beta
        axes = (0, 2, 3, 4)
        if train:
            xd = x.data
            mu = xd.mean(axis=axes)
            var = xd.var(axis=axes)
            m = xd.size // self.channels
            self.running_mean += self.MOMENTUM * (mu - self.running_mean)
            # unbiased variance for the running estimate, biased in the pass
            unbiased = var * (m / max(m - 1, 1))
            self.running_var += self.MOMENTUM * (unbiased - self.running_var)
            inv = 1.0 / np.sqrt(var + self.EPS)
            # out = a*x + s with per-channel a, s (avoids materialising xhat)
            a = (g.data * inv)[None, :, None, None, None]
            s = (b.data - g.data * inv * mu)[None, :, None, None, None]
            out = xd * a + s

            def bwd(grad):
                gb = grad.sum(axis=axes)
                gdotx = np.einsum("ncthw,ncthw->c", grad, xd)
                gg = inv * (gdotx - mu * gb)
                # gx = p*grad + r*x + q per channel, from the batch-stats chain
                p = g.data * inv
                r = -p * inv * inv * (gdotx - mu * gb) / m
                q = -p * gb / m - r * mu
                gx = grad * p[None, :, None, None, None]
                gx += xd * r[None, :, None, None, None]
                gx += q[None, :, None, None, None]
                return gx, gg, gb

            return result_of(out, (x, g, b), bwd)
        inv = 1.0 / np.sqrt(self.running_var + self.EPS)
        scale = (g.data * inv)[None, :, None, None, None]
        shift = (b.data - g.data * self.running_mean * inv)[None, :, None, None, None]
        out = x.data * scale + shift
        xd = x.data

        def bwd_eval(grad):
            gg = np.einsum("ncthw,ncthw->c", grad,
                           (xd - self.running_mean[None, :, None, None, None])
                           * inv[None, :, None, None, None])
            gb = grad.sum(axis=axes)
            return grad * scale, gg, gb

        return result_of(out, (x, g, b), bwd_eval)


# ---------------------------------------------------------------------------
# classifier-head ops (2-D tracked values)
# ---------------------------------------------------------------------------


def linear(x: Tracked, weight: Param, bias: Param) -> Tracked:
    """Affine map on (N, C) features: out = x @ W.T + b, W of shape (K, C)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: features {x.data.shape} vs weight {weight.data.shape}")
    out = x.data @ weight.data.T + bias.data[None, :]
    xd = x.data

    def bwd(g):
        return g @ weight.data, g.T @ xd, g.sum(axis=0)

    return result_of(out, (x, weight, bias), bwd, cls=Tracked)


def dropout(x: Tracked, rate: float, rng: np.random.Generator, train: bool) -> Tracked:
    """Inverted dropout; identity when not training or rate == 0."""
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be < 1, got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return result_of(out, (x,), bwd, cls=Tensor5 if isinstance(x, Tensor5) else Tracked)


def as_tracked(data, grad_tracked: bool = False) -> Tracked:
    return Tracked(np.asarray(data, dtype=np.float64), grad_tracked)
