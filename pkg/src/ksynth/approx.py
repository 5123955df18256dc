"""Executable checks of the kernel-approximation chain.

Five approximation forms for a large spatiotemporal kernel are evaluated
literally (dense channel mixing, same padding, no architectural shortcuts):

    LargeKernel        one L x L x L convolution
    StackedSmall       n = (L-1)/2 stacked 3x3x3 convolutions
    MultiScaleSum      sum of channel-weighted convolutions at sizes 1,3,...,L
    GroupedMultiScale  the same with disjoint channel groups per scale
    SeparableFull      sum_ij of W_ij-weighted spatial then temporal convs
    RankOneSeparable   the same with W_ij factored as w'_i * w_j

Channel weights in the separable forms multiply the spatially-convolved
tensor, before the temporal convolution; under that placement the rank-1
factorisation is an exact identity for arbitrary channel-mixing kernels,
which is what the equivalence check asserts numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .ops import conv5d_raw
from .tensor import Tensor5

# ---------------------------------------------------------------------------
# forms
# ---------------------------------------------------------------------------


@dataclass
class LargeKernel:
    weights: np.ndarray  # (C, C, L, L, L)


@dataclass
class StackedSmall:
    weights: list  # n arrays of (C, C, 3, 3, 3)


@dataclass
class MultiScaleSum:
    kernels: list          # sizes 1, 3, ..., L; arrays (C, C, k, k, k)
    scale_weights: list    # per-scale channel weights, arrays (C,)


@dataclass
class GroupedMultiScale:
    kernels: list  # group g gets (c, c, k_g, k_g, k_g) with c = C/G


@dataclass
class SeparableFull:
    w_grid: np.ndarray     # (G, G, C): channel weights per (temporal, spatial) pair
    spatial: list          # G arrays (C, C, 1, 2j-1, 2j-1)
    temporal: list         # G arrays (C, C, 2i-1, 1, 1)


@dataclass
class RankOneSeparable:
    w_temporal: np.ndarray  # (G, C)
    w_spatial: np.ndarray   # (G, C)
    spatial: list
    temporal: list


def _data(u) -> np.ndarray:
    return u.data if isinstance(u, Tensor5) else np.asarray(u, dtype=np.float64)


def _chmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return w[None, :, None, None, None] * x


def eval_form(form, u) -> np.ndarray:
    """Evaluate one approximation form on a (N, C, T, H, W) clip."""
    x = _data(u)
    if isinstance(form, LargeKernel):
        return conv5d_raw(x, form.weights)
    if isinstance(form, StackedSmall):
        out = x
        for w in form.weights:
            out = conv5d_raw(out, w)
        return out
    if isinstance(form, MultiScaleSum):
        if len(form.kernels) != len(form.scale_weights):
            raise ConfigError("one channel weight per scale is required")
        out = np.zeros_like(x)
        for w, cw in zip(form.kernels, form.scale_weights):
            out += _chmul(np.asarray(cw), conv5d_raw(x, w))
        return out
    if isinstance(form, GroupedMultiScale):
        g = len(form.kernels)
        c_total = x.shape[1]
        if c_total % g:
            raise ConfigError(f"C={c_total} not divisible into {g} groups")
        c = c_total // g
        parts = [conv5d_raw(x[:, i * c:(i + 1) * c], w)
                 for i, w in enumerate(form.kernels)]
        return np.concatenate(parts, axis=1)
    if isinstance(form, SeparableFull):
        g = form.w_grid.shape[0]
        spatial_outs = [conv5d_raw(x, w) for w in form.spatial]
        out = np.zeros_like(x)
        for i in range(g):
            acc = np.zeros_like(x)
            for j in range(g):
                acc += _chmul(form.w_grid[i, j], spatial_outs[j])
            out += conv5d_raw(acc, form.temporal[i])
        return out
    if isinstance(form, RankOneSeparable):
        g = form.w_temporal.shape[0]
        spatial_outs = [conv5d_raw(x, w) for w in form.spatial]
        out = np.zeros_like(x)
        for i in range(g):
            inner = np.zeros_like(x)
            for j in range(g):
                inner += _chmul(form.w_spatial[j], spatial_outs[j])
            out += conv5d_raw(_chmul(form.w_temporal[i], inner), form.temporal[i])
        return out
    raise UsageError(f"unknown form {type(form).__name__}")


def check_rank1_equivalence(w_temporal, w_spatial, u, spatial, temporal) -> float:
    """Max relative deviation between the full-grid and factored evaluations
    when the grid is constructed exactly as the rank-1 product."""
    w_temporal = np.asarray(w_temporal, dtype=np.float64)
    w_spatial = np.asarray(w_spatial, dtype=np.float64)
    grid = w_temporal[:, None, :] * w_spatial[None, :, :]
    a = eval_form(SeparableFull(grid, spatial, temporal), u)
    b = eval_form(RankOneSeparable(w_temporal, w_spatial, spatial, temporal), u)
    return relative_deviation(a, b)


def relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


# ---------------------------------------------------------------------------
# receptive-field measurement
# ---------------------------------------------------------------------------


@dataclass
class ConvStage:
    """A linear stage of a composition: kernel extents plus dilation."""

    size: tuple[int, int, int]                # (kt, kh, kw)
    dilation: tuple[int, int, int] = (1, 1, 1)
    linear = True

    @property
    def reach(self) -> tuple[int, int, int]:
        return tuple(d * (k - 1) + 1 for k, d in zip(self.size, self.dilation))


@dataclass
class NonlinearStage:
    """Marker for ReLU / BN / pooling entries; rejected by the measurement."""

    kind: str
    linear = False


def measure_receptive_field(stages, channels: int = 1, seed: int = 0):
    """Bounding box (rt, rh, rw) of the impulse response of a composition.

    The impulse sits at the exact centre of an odd-sized clip large enough
    that no boundary truncates the support; stage kernels are strictly
    positive so supports cannot cancel.
    """
    stages = list(stages)
    for s in stages:
        if not getattr(s, "linear", False):
            raise UsageError(f"nonlinear stage {s!r} in a receptive-field measurement")
        if not isinstance(s, ConvStage):
            raise UsageError(f"unsupported stage {s!r}")
    reach = [1, 1, 1]
    for s in stages:
        for a in range(3):
            reach[a] += s.reach[a] - 1
    dims = [r + 4 + ((r + 4 + 1) % 2) for r in reach]  # odd, with margin
    t, h, w = dims
    x = np.zeros((1, channels, t, h, w))
    x[0, :, t // 2, h // 2, w // 2] = 1.0
    rng = np.random.default_rng(seed)
    for s in stages:
        kt, kh, kw = s.size
        wts = rng.uniform(0.5, 1.5, size=(channels, channels, kt, kh, kw))
        x = conv5d_raw(x, wts, dilation=s.dilation)
    nz = np.argwhere(np.abs(x[0]).sum(axis=0) > 0)
    if nz.size == 0:
        return (0, 0, 0)
    spans = nz.max(axis=0) - nz.min(axis=0) + 1
    return tuple(int(v) for v in spans)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def count_params_flops(kind: str, c: int, l: int, g: int = 1) -> tuple[int, int]:
    """Closed-form (parameters, multiply-adds per output position).

    A position means all C output channels at one (t, h, w) site.  Grouped
    forms divide both counts by G for equal kernel sizes.
    """
    sizes = list(range(1, l + 1, 2))
    if kind == "large":
        p = c * c * l ** 3
        return p, p
    if kind == "stacked":
        n = (l - 1) // 2
        p = n * c * c * 27
        return p, p
    if kind == "multiscale":
        conv = sum(c * c * k ** 3 for k in sizes)
        weights = len(sizes) * c
        return conv + weights, conv + weights
    if kind == "grouped":
        if len(sizes) != g:
            raise ConfigError(f"grouped form needs G = {len(sizes)} for L={l}")
        cg = c // g
        conv = sum(cg * cg * k ** 3 for k in sizes)
        return conv, conv
    if kind == "separable":
        spatial = sum(c * c * k * k for k in sizes)
        temporal = sum(c * c * k for k in sizes)
        grid = g * g * c
        return spatial + temporal + grid, spatial + temporal + grid
    if kind == "rank1":
        spatial = sum(c * c * k * k for k in sizes)
        temporal = sum(c * c * k for k in sizes)
        factors = 2 * g * c
        return spatial + temporal + factors, spatial + temporal + factors
    raise UsageError(f"unknown form kind {kind!r}")


# ---------------------------------------------------------------------------
# random instances for the verification suite
# ---------------------------------------------------------------------------


def random_separable_instance(rng, g: int, c: int, clip_shape):
    spatial = [rng.normal(size=(c, c, 1, 2 * j - 1, 2 * j - 1)) for j in range(1, g + 1)]
    temporal = [rng.normal(size=(c, c, 2 * i - 1, 1, 1)) for i in range(1, g + 1)]
    wt = rng.normal(size=(g, c))
    ws = rng.normal(size=(g, c))
    u = rng.normal(size=clip_shape)
    return wt, ws, u, spatial, temporal
