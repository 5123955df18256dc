import numpy as np
import pytest

from ksynth import GradTape, Param, Tensor5, UsageError
from ksynth import fusion, losses
from util import fd_check


def fm_with(w):
    w = np.asarray(w, dtype=float)
    return fusion.FusionMatrix(w.shape[1], w.shape[2], g_out=w.shape[0], weights=w)


class TestInteractionLoss:
    def test_zero_matrix(self):
        fm = fusion.FusionMatrix(3, 4)
        assert float(losses.interaction_loss(fm).data) == -0.5

    def test_ln3_norms(self):
        # every ||T_ij||_1 = ln 3 -> sigmoid = 0.75 -> loss -0.75
        w = np.full((2, 2, 1), np.log(3.0))
        assert abs(float(losses.interaction_loss(fm_with(w)).data) + 0.75) < 1e-12

    def test_saturates_to_minus_one(self):
        vals = []
        for scale in [0.0, 0.2, 0.5, 1.0, 2.0, 10.0]:
            w = np.full((2, 2, 3), scale)
            vals.append(float(losses.interaction_loss(fm_with(w)).data))
        assert all(b < a for a, b in zip(vals, vals[1:]))  # monotone decreasing
        assert vals[0] == -0.5
        assert vals[-1] > -1.0 and abs(vals[-1] + 1.0) < 1e-9

    def test_bounds_random(self, rng):
        for _ in range(10):
            w = rng.normal(size=(3, 3, 5))
            v = float(losses.interaction_loss(fm_with(w)).data)
            assert -1.0 < v <= -0.5

    def test_gradient_fd(self, rng):
        # keep entries away from the |.| kink at zero
        w = rng.uniform(0.2, 1.0, size=(2, 2, 3)) * rng.choice([-1, 1], size=(2, 2, 3))
        fm = fm_with(w)

        def loss(leaves):
            return losses.interaction_loss(fm)

        fd_check(loss, [fm.weights], n_probes=25, rng=rng)

    def test_descent_increases_min_l1(self, rng):
        # minimising the interaction loss alone pushes every ||T_ij||_1 up
        fm = fm_with(rng.uniform(0.05, 0.2, size=(2, 2, 4))
                     * rng.choice([-1, 1], size=(2, 2, 4)))
        mins = []
        for _ in range(25):
            mins.append(fusion.l1_importance(fm).min())
            with GradTape() as tape:
                l = losses.interaction_loss(fm)
            tape.backward(l)
            fm.weights.data -= 0.5 * tape.grad(fm.weights)
        assert all(b > a for a, b in zip(mins, mins[1:]))


class TestCapacityLoss:
    def test_identical_groups(self, rng):
        base = rng.normal(size=(2, 3, 2, 4, 4)) + 2.0
        y = Tensor5(np.concatenate([base, base, base, base], axis=1))
        v = float(losses.capacity_loss(y, 4).data)
        assert abs(v - 1.0) < 1e-9

    def test_orthogonal_pair(self):
        # G=2 with orthogonal pooled vectors: (2*1 + 2*0) / 4 = 0.5
        y = np.zeros((1, 4, 1, 2, 2))
        y[0, 0] = 1.0  # group 1 pools to (1, 0)
        y[0, 3] = 1.0  # group 2 pools to (0, 1)
        v = float(losses.capacity_loss(Tensor5(y), 2).data)
        assert abs(v - 0.5) < 1e-9

    def test_matches_pairwise_oracle(self, rng):
        y = rng.normal(size=(3, 8, 2, 3, 3))
        got = float(losses.capacity_loss(Tensor5(y), 4).data)
        u = y.mean(axis=(2, 3, 4)).reshape(3, 4, 2)
        total = 0.0
        for n in range(3):
            for i in range(4):
                for j in range(4):
                    if i == j:
                        total += 1.0 / 3
                        continue
                    a, b = u[n, i], u[n, j]
                    total += (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) / 3
        assert abs(got - total / 16) < 1e-10

    def test_diagonal_contributes_exactly_one_over_g(self, rng):
        # capacity = 1/G + (1/G^2) * sum_{i!=j} cosine terms
        for g in (2, 4):
            y = rng.normal(size=(2, g * 3, 2, 3, 3))
            v = float(losses.capacity_loss(Tensor5(y), g).data)
            u = y.mean(axis=(2, 3, 4)).reshape(2, g, 3)
            off = 0.0
            for n in range(2):
                for i in range(g):
                    for j in range(g):
                        if i != j:
                            a, b = u[n, i], u[n, j]
                            off += (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) / 2
            assert abs(v - (1.0 / g + off / g ** 2)) < 1e-10

    def test_zero_pooled_diagnostics(self):
        y = np.zeros((1, 4, 1, 2, 2))
        y[0, 2:] = 1.0
        diag = {}
        v = float(losses.capacity_loss(Tensor5(y), 2, diagnostics=diag).data)
        assert diag["zero_pooled"] == 1
        assert np.isfinite(v)

    def test_gradient_fd(self, rng):
        y = Tensor5(rng.uniform(0.2, 1.5, size=(2, 4, 2, 2, 2)), True)

        def loss(leaves):
            (yy,) = leaves
            return losses.capacity_loss(yy, 2)

        fd_check(loss, [y], n_probes=30, rng=rng)


class TestCrossEntropy:
    def test_uniform_logits(self):
        z = losses.cross_entropy(losses.Tracked(np.zeros((4, 5))), np.zeros(4, dtype=int))
        assert abs(float(z.data) - np.log(5)) < 1e-12

    def test_saturated_true_class(self):
        logits = np.zeros((2, 3))
        logits[:, 1] = 1000.0
        v = losses.cross_entropy(losses.Tracked(logits), np.array([1, 1]))
        assert float(v.data) < 1e-12

    def test_matches_logsumexp_oracle(self, rng):
        z = rng.normal(size=(5, 7))
        labels = rng.integers(0, 7, size=5)
        got = float(losses.cross_entropy(losses.Tracked(z), labels).data)
        want = np.mean([np.log(np.exp(z[i]).sum()) - z[i, labels[i]]
                        for i in range(5)])
        assert abs(got - want) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(UsageError):
            losses.cross_entropy(losses.Tracked(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_fd(self, rng):
        z = losses.Tracked(rng.normal(size=(4, 5)), True)
        labels = rng.integers(0, 5, size=4)

        def loss(leaves):
            (zz,) = leaves
            return losses.cross_entropy(zz, labels)

        fd_check(loss, [z], n_probes=25, rng=rng)


class TestTotalLoss:
    def test_zero_weights(self, rng):
        cls = losses.Tracked(np.asarray(1.7))
        inter = [losses.Tracked(np.asarray(-0.6))]
        caps = [losses.Tracked(np.asarray(0.9))]
        total = losses.total_loss(cls, inter, caps, losses.LossWeights(0.0, 0.0))
        assert float(total.data) == 1.7

    def test_arithmetic(self):
        cls = losses.Tracked(np.asarray(1.0))
        inter = [losses.Tracked(np.asarray(-0.5))]
        caps = [losses.Tracked(np.asarray(1.0))]
        total = losses.total_loss(cls, inter, caps, losses.LossWeights(0.01, 0.001))
        assert abs(float(total.data) - 0.996) < 1e-15

    def test_block_averaging(self):
        cls = losses.Tracked(np.asarray(0.0))
        inter = [losses.Tracked(np.asarray(-0.5)), losses.Tracked(np.asarray(-1.0))]
        total = losses.total_loss(cls, inter, [], losses.LossWeights(1.0, 0.0))
        assert abs(float(total.data) + 0.75) < 1e-15

    def test_gradient_through_composition(self, rng):
        # d total / d T via both regularisers, finite-difference checked
        w = rng.uniform(0.2, 0.8, size=(2, 2, 2)) * rng.choice([-1, 1], (2, 2, 2))
        fm = fm_with(w)
        y = Tensor5(rng.uniform(0.2, 1.2, size=(2, 4, 2, 2, 2)), True)
        labels = np.array([0, 1])
        lw = losses.LossWeights(0.01, 0.001)

        def loss(leaves):
            ww, yy = leaves
            z = losses.Tracked(yy.data.mean(axis=(2, 3, 4)), False)
            fused = fusion.apply(fm, yy)
            cls = losses.Tracked(np.asarray(0.3))
            return losses.total_loss(
                cls,
                [losses.interaction_loss(fm)],
                [losses.capacity_loss(fused, 2)],
                lw)

        fd_check(loss, [fm.weights, y], n_probes=30, rng=rng)
