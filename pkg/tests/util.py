"""Shared oracles for the test suite.

The finite-difference checker and the naive loop oracles here are kept
independent of the fast paths they validate.
"""

import numpy as np

from ksynth import GradTape


def rel_err(a, b, floor=1e-9):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_check(make_loss, leaves, n_probes=20, h=1e-5, rng=None, tol=1e-4):
    """Compare tape gradients with central finite differences.

    ``make_loss`` maps the list of leaf Tracked/Param objects to a scalar
    Tracked; it is re-evaluated with perturbed leaf data for the numeric
    side.  Probes are random coordinates of random leaves.
    """
    rng = rng or np.random.default_rng(0)
    with GradTape() as tape:
        loss = make_loss(leaves)
    tape.backward(loss)
    grads = [tape.grad(p) for p in leaves]

    worst = 0.0
    for _ in range(n_probes):
        pi = int(rng.integers(len(leaves)))
        leaf = leaves[pi]
        if leaf.data.size == 0:
            continue
        flat = int(rng.integers(leaf.data.size))
        idx = np.unravel_index(flat, leaf.data.shape)
        orig = leaf.data[idx]
        leaf.data[idx] = orig + h
        up = float(make_loss(leaves).data)
        leaf.data[idx] = orig - h
        dn = float(make_loss(leaves).data)
        leaf.data[idx] = orig
        fd = (up - dn) / (2.0 * h)
        an = grads[pi][idx]
        if abs(fd) < 1e-9 and abs(an) < 1e-9:
            continue
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-9)
        worst = max(worst, err)
        assert err <= tol, (
            f"gradient mismatch at leaf {pi} index {idx}: analytic {an}, fd {fd}")
    return worst
