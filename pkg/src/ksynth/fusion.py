"""The learnable block-transformation fusion layer and its frozen special cases.

A :class:`FusionMatrix` carries a (g_out, g_in) grid of per-channel weight
vectors routing ``g_in`` input feature groups to ``g_out`` output groups:

    Y_i = sum_j T_ij (channel-wise *) X_j

The square case (g_out == g_in == G) is the standard layer; the rectangular
case arises when the spatial and temporal kernel bags have different branch
counts.  Channel grouping, channel dropout and channel shuffling are frozen
instances of the same matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Param, Tensor5, Tracked, result_of

IR_EPS = 1e-6  # learned weights need a numeric threshold for "nonzero flow"


class FusionMatrix:
    """Block transformation matrix; entries are c-length channel weights.

    ``weights`` has shape (g_out, g_in, c).  ``G`` is defined for the square
    case only.  Trainable matrices start at zero so a freshly built fusion
    layer routes nothing (residual-identity property of the enclosing block).
    """

    def __init__(self, g: int, c: int, g_out: int | None = None,
                 weights: np.ndarray | None = None, trainable: bool = True,
                 name: str = "fusion"):
        g_out = g if g_out is None else g_out
        if g < 1 or g_out < 1 or c < 1:
            raise ConfigError(f"bad fusion dims g_in={g}, g_out={g_out}, c={c}")
        if weights is None:
            weights = np.zeros((g_out, g, c))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (g_out, g, c):
            raise DimensionError(
                f"weights shape {weights.shape} != ({g_out}, {g}, {c})")
        self.g_in = g
        self.g_out = g_out
        self.c = c
        self.weights = Param(weights, name=name, trainable=trainable)

    @property
    def trainable(self) -> bool:
        return self.weights.grad_tracked

    @property
    def square(self) -> bool:
        return self.g_in == self.g_out

    @property
    def G(self) -> int:
        if not self.square:
            raise ConfigError(f"G undefined for {self.g_out}x{self.g_in} fusion")
        return self.g_in

    def subgroups(self) -> np.ndarray:
        """View of each entry split into G sub-vectors of length c/G (square only)."""
        g = self.G
        if self.c % g:
            raise ConfigError(f"c={self.c} not divisible into {g} sub-groups")
        return self.weights.data.reshape(self.g_out, self.g_in, g, self.c // g)

    def copy(self, trainable: bool | None = None) -> "FusionMatrix":
        return FusionMatrix(self.g_in, self.c, g_out=self.g_out,
                            weights=self.weights.data.copy(),
                            trainable=self.trainable if trainable is None else trainable,
                            name=self.weights.name)


def apply(fm: FusionMatrix, x: Tensor5) -> Tensor5:
    """Route grouped channels: Y_i = sum_j T_ij * X_j (channel-wise products).

    Input has g_in groups of c channels; output has g_out groups of c.
    """
    n, ch, t, h, w = x.shape
    if ch != fm.g_in * fm.c:
        raise ConfigError(
            f"fusion expects C = g_in*c = {fm.g_in * fm.c}, tensor has C={ch}")
    xg = x.data.reshape(n, fm.g_in, fm.c, t, h, w)
    wd = fm.weights
    out = np.einsum("ijk,njkthw->nikthw", wd.data, xg,
                    optimize=True).reshape(n, fm.g_out * fm.c, t, h, w)
    xd = x.data

    def bwd(g):
        gg = g.reshape(n, fm.g_out, fm.c, t, h, w)
        xx = xd.reshape(n, fm.g_in, fm.c, t, h, w)
        gx = np.einsum("ijk,nikthw->njkthw", wd.data, gg,
                       optimize=True).reshape(x.shape)
        gw = np.einsum("nikthw,njkthw->ijk", gg, xx, optimize=True)
        return gx, gw

    return result_of(out, (x, wd), bwd)


# ---------------------------------------------------------------------------
# closed-form constructors for the conventional fusion strategies
# ---------------------------------------------------------------------------


def make_grouping(g: int, c: int) -> FusionMatrix:
    """Identity routing: group i flows to group i untouched."""
    w = np.zeros((g, g, c))
    for i in range(g):
        w[i, i] = 1.0
    return FusionMatrix(g, c, weights=w, trainable=False, name="grouping")


def _require_subgroups(g: int, c: int):
    if c % g:
        raise ConfigError(f"c={c} must be divisible by G={g} for sub-grouping")


def make_dropout(g: int, c: int) -> FusionMatrix:
    """Every output group is the concatenation X_1(1) + X_2(2) + ... + X_G(G).

    All output groups are identical; (G-1)/G of the input channels are unused.
    """
    _require_subgroups(g, c)
    s = c // g
    w = np.zeros((g, g, c))
    for i in range(g):
        for j in range(g):
            w[i, j, j * s:(j + 1) * s] = 1.0
    return FusionMatrix(g, c, weights=w, trainable=False, name="dropout")


def make_shuffle(g: int, c: int) -> FusionMatrix:
    """Channel shuffling: sub-group k of output group i comes from input
    group (i + k) mod G, so T_ij(k) = 1 exactly when k-1 = (j-i) mod G."""
    _require_subgroups(g, c)
    s = c // g
    w = np.zeros((g, g, c))
    for i in range(g):
        for j in range(g):
            k = (j - i) % g  # zero-based sub-group index
            w[i, j, k * s:(k + 1) * s] = 1.0
    return FusionMatrix(g, c, weights=w, trainable=False, name="shuffle")


def shuffle_permutation(g: int, c: int) -> np.ndarray:
    """Independent oracle: the channel permutation realised by make_shuffle.

    Output channel (i, k, r) reads input channel ((i + k) mod G, k, r) where
    k indexes sub-groups of length c/G and r positions inside them.
    """
    _require_subgroups(g, c)
    s = c // g
    perm = np.empty(g * c, dtype=int)
    for i in range(g):
        for k in range(g):
            src_group = (i + k) % g
            for r in range(s):
                perm[i * c + k * s + r] = src_group * c + k * s + r
    return perm


def apply_permutation(x: Tensor5 | np.ndarray, perm: np.ndarray) -> np.ndarray:
    data = x.data if isinstance(x, Tracked) else np.asarray(x)
    return data[:, perm]


# ---------------------------------------------------------------------------
# metrics and reshapes
# ---------------------------------------------------------------------------


def ir_interactions(fm: FusionMatrix, eps: float = IR_EPS) -> int:
    """Number of channels flowing between distinct groups (i != j)."""
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}")
    w = fm.weights.data
    count = 0
    for i in range(fm.g_out):
        for j in range(fm.g_in):
            if i == j:
                continue
            count += int(np.count_nonzero(np.abs(w[i, j]) > eps))
    return count


def reshape_from_w(w_grid: np.ndarray, g: int) -> FusionMatrix:
    """Build T from the G-element grid of C-length weights: row i of T is
    W_i cut into G pieces of length c = C/G."""
    w_grid = np.asarray(w_grid, dtype=np.float64)
    if w_grid.shape[0] != g:
        raise DimensionError(f"expected {g} weight vectors, got {w_grid.shape[0]}")
    cc = w_grid.shape[1]
    if cc % g:
        raise ConfigError(f"C={cc} not divisible by G={g}")
    c = cc // g
    return FusionMatrix(g, c, weights=w_grid.reshape(g, g, c), trainable=False,
                        name="from_w")


def to_w(fm: FusionMatrix) -> np.ndarray:
    """Inverse of reshape_from_w; exact round-trip."""
    if not fm.square:
        raise ConfigError("to_w needs a square fusion matrix")
    return fm.weights.data.reshape(fm.g_in, fm.g_in * fm.c).copy()


def softmax_k(fm: FusionMatrix) -> FusionMatrix:
    """Soft-max across the sub-group axis of every entry.

    At each within-sub-group position the G sub-group weights are normalised
    to sum to one, which guarantees every entry has positive l1 mass.
    """
    g = fm.G
    _require_subgroups(g, fm.c)
    v = fm.weights.data.reshape(fm.g_out, fm.g_in, g, fm.c // g)
    m = v.max(axis=2, keepdims=True)
    e = np.exp(v - m)
    out = (e / e.sum(axis=2, keepdims=True)).reshape(fm.g_out, fm.g_in, fm.c)
    return FusionMatrix(fm.g_in, fm.c, g_out=fm.g_out, weights=out,
                        trainable=False, name="softmax_k")


def l1_importance(fm: FusionMatrix) -> np.ndarray:
    """(g_out, g_in) matrix of ||T_ij||_1 values."""
    return np.abs(fm.weights.data).sum(axis=2)


def export_l1_csv(fm: FusionMatrix, path) -> None:
    """Importance heat-map rows as "i,j,l1" with 1-based indices."""
    imp = l1_importance(fm)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "l1"])
        for i in range(fm.g_out):
            for j in range(fm.g_in):
                wr.writerow([i + 1, j + 1, f"{imp[i, j]:.12g}"])


@dataclass
class RankOnePair:
    """The factor grids of the rank-1 decomposition: row weights (temporal
    side) and column weights (spatial side), each a grid of C-length vectors."""

    w_temporal: np.ndarray  # (G, C)
    w_spatial: np.ndarray   # (G, C)

    def outer(self) -> np.ndarray:
        """The (G, G, C) grid with entry (i, j) = w_temporal[i] * w_spatial[j]."""
        return self.w_temporal[:, None, :] * self.w_spatial[None, :, :]
