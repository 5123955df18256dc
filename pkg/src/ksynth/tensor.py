"""Core containers for the tensor engine: tracked arrays and the gradient tape.

Everything is double precision.  A ``Tensor5`` is a dense (N, C, T, H, W)
activation; a ``Param`` is a trainable array of any shape.  Operations on
tracked values record backward closures on the active :class:`GradTape`,
which replays them in reverse execution order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_UIDS = itertools.count(1)

# Single active tape; training is single-writer per step by contract.
_ACTIVE_TAPE: "GradTape | None" = None


def active_tape() -> "GradTape | None":
    return _ACTIVE_TAPE


class Tracked:
    """An ndarray with an identity, optionally participating in differentiation."""

    def __init__(self, data, grad_tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.uid = next(_UIDS)
        self.grad_tracked = bool(grad_tracked)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.data.shape}, tracked={self.grad_tracked})"


class Tensor5(Tracked):
    """Dense 5-D tensor (batch N, channels C, time T, height H, width W).

    Data is kept C-contiguous so the flat view is row-major: index
    (n, c, t, h, w) lives at offset ((((n*C + c)*T + t)*H + h)*W + w).
    """

    def __init__(self, data, grad_tracked: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 5:
            raise DimensionError(f"Tensor5 expects 5 axes (N,C,T,H,W), got shape {arr.shape}")
        super().__init__(arr, grad_tracked)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def copy(self) -> "Tensor5":
        return Tensor5(self.data.copy(), self.grad_tracked)


class Param(Tracked):
    """A named trainable array (kernel weights, fusion entries, BN affine, ...)."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), grad_tracked=trainable)
        self.name = name

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, trainable={self.grad_tracked})"


class GradTape:
    """Reverse-mode differentiation over a recorded operation sequence.

    Usage::

        with GradTape() as tape:
            loss = ...      # ops record themselves while the tape is active
        tape.backward(loss)
        g = tape.grad(param)

    The backward pass visits nodes in reverse execution order exactly once
    and accumulates input gradients in a fixed order, so results are
    reproducible bit for bit.
    """

    def __init__(self):
        # node: (out_uid, ((in_uid, in_shape), ...), backward_fn)
        self._nodes: list = []
        self._grads: dict[int, np.ndarray] = {}
        self._ran_backward = False

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise UsageError("a GradTape is already active; nests are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: Tracked, inputs: Sequence[Tracked],
               backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> None:
        self._nodes.append((out.uid, tuple(t.uid for t in inputs), backward))

    def backward(self, loss: Tracked) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every recorded input."""
        if loss.data.shape != ():
            raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        self._grads[loss.uid] = np.array(1.0)
        for out_uid, in_uids, fn in reversed(self._nodes):
            g_out = self._grads.get(out_uid)
            if g_out is None:
                continue
            contribs = fn(g_out)
            for uid, g_in in zip(in_uids, contribs):
                if g_in is None:
                    continue
                acc = self._grads.get(uid)
                self._grads[uid] = g_in if acc is None else acc + g_in
        self._ran_backward = True

    def grad(self, t: Tracked) -> np.ndarray:
        """Accumulated gradient of the last backward() w.r.t. ``t``.

        A tracked value the loss never touched gets an all-zero gradient.
        """
        g = self._grads.get(t.uid)
        if g is None:
            return np.zeros_like(t.data)
        return np.broadcast_to(g, t.data.shape).astype(np.float64, copy=False) \
            if g.shape != t.data.shape else g


def backward(loss: Tracked, tape: GradTape) -> None:
    """Functional form of :meth:`GradTape.backward`."""
    tape.backward(loss)


def result_of(data: np.ndarray, inputs: Sequence[Tracked], backward_fn,
              cls=Tensor5) -> Tracked:
    """Wrap an op output, recording ``backward_fn`` if differentiation is on."""
    tracked = any(t.grad_tracked for t in inputs)
    out = cls(data, tracked) if cls is Tensor5 else Tracked(data, tracked)
    tape = _ACTIVE_TAPE
    if tape is not None and tracked:
        tape.record(out, inputs, backward_fn)
    return out
