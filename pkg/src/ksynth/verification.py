"""Named property checks behind the ``verify`` command.

Every invariant of the tensor engine, the fusion layer, the synthesizer
block, the losses and the approximation lab is registered here as one
check returning a measured deviation and a pass/fail flag.  The suite is
deterministic; ``inject_fault=True`` perturbs one kernel weight inside the
convolution-linearity path so a broken toolchain is detectable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import approx, fusion, losses, ops, synthesizer
from .tensor import GradTape, Param, Tensor5, Tracked, result_of


@dataclass
class CheckResult:
    form: str        # module / area
    check: str
    deviation: float
    threshold: float
    passed: bool

    def row(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.form},{self.check},{self.deviation:.3e},{self.threshold:.1e},{status}"


def _sum_all(x):
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return result_of(out, (x,), bwd, cls=Tracked)


def _fd_max_err(make_loss, leaves, rng, n_probes=20, h=1e-5):
    with GradTape() as tape:
        loss = make_loss()
    tape.backward(loss)
    grads = [tape.grad(p) for p in leaves]
    worst = 0.0
    for _ in range(n_probes):
        pi = int(rng.integers(len(leaves)))
        leaf = leaves[pi]
        flat = int(rng.integers(leaf.data.size))
        idx = np.unravel_index(flat, leaf.data.shape)
        orig = leaf.data[idx]
        leaf.data[idx] = orig + h
        up = float(make_loss().data)
        leaf.data[idx] = orig - h
        dn = float(make_loss().data)
        leaf.data[idx] = orig
        fd = (up - dn) / (2 * h)
        an = grads[pi][idx]
        if abs(fd) < 1e-9 and abs(an) < 1e-9:
            continue
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-9))
    return worst


# ---------------------------------------------------------------------------
# tensor-core checks
# ---------------------------------------------------------------------------


def check_conv_linearity(rng, fault=False):
    x = rng.normal(size=(1, 2, 4, 6, 6))
    y = rng.normal(size=(1, 2, 4, 6, 6))
    a, b = 1.3, -0.7
    k = ops.SpatialKernel.create(2, 2, 3, rng)
    if fault:
        k.weights.data[0, 0, 0, 1, 1] += 0.25  # injected fault hook
        lhs_k = ops.SpatialKernel(3, weights=Param(k.weights.data + 0.25))
    else:
        lhs_k = k
    lhs = ops.conv_spatial(Tensor5(a * x + b * y), lhs_k).data
    rhs = (a * ops.conv_spatial(Tensor5(x), k).data
           + b * ops.conv_spatial(Tensor5(y), k).data)
    dev = float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-30))
    return dev, 1e-10


def check_temporal_linearity(rng, fault=False):
    x = rng.normal(size=(1, 2, 6, 3, 3))
    y = rng.normal(size=(1, 2, 6, 3, 3))
    k = ops.TemporalKernel.create(2, 2, 5, rng)
    lhs = ops.conv_temporal(Tensor5(0.4 * x - 2.0 * y), k).data
    rhs = 0.4 * ops.conv_temporal(Tensor5(x), k).data - 2.0 * ops.conv_temporal(Tensor5(y), k).data
    dev = float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-30))
    return dev, 1e-10


def check_impulse_support(rng, fault=False):
    dev = 0.0
    for size, dil in [(1, 1), (3, 1), (3, 2), (5, 1)]:
        rf = dil * (size - 1) + 1
        x = np.zeros((1, 1, 1, 15, 15))
        x[0, 0, 0, 7, 7] = 1.0
        w = Param(rng.uniform(0.5, 1.5, size=(1, 1, 1, size, size)))
        out = ops.conv_spatial(Tensor5(x), ops.SpatialKernel(size, dilation=dil,
                                                             weights=w)).data
        nz = np.argwhere(out[0, 0, 0] != 0)
        span = nz.max(axis=0) - nz.min(axis=0) + 1
        dev = max(dev, float(abs(span[0] - rf)), float(abs(span[1] - rf)))
    return dev, 0.5


def check_split_concat_roundtrip(rng, fault=False):
    x = rng.normal(size=(2, 8, 3, 4, 4))
    a, b = ops.split_channels(Tensor5(x), 0.25)
    back = ops.concat_channels([a, b]).data
    return float(np.abs(back - x).max()), 0.0  # bit-exact required


def check_fd_gradients(rng, fault=False):
    """Central finite differences across every differentiable op."""
    worst = 0.0
    x = Tensor5(rng.uniform(-1, 1, size=(2, 4, 4, 4, 4)), True)
    ks = ops.SpatialKernel.create(4, 4, 3, rng, dilation=2, groups=2)
    kt = ops.TemporalKernel.create(4, 4, 3, rng)
    bn = ops.BatchNorm(4)
    wlin = Param(rng.normal(size=(3, 4)))
    blin = Param(rng.normal(size=3))
    cw = Param(rng.uniform(0.5, 1.5, size=4))
    labels = rng.integers(0, 3, size=2)

    def net_loss():
        h = ops.conv_spatial(x, ks)
        h = bn(h, train=True)
        h = ops.relu(h)
        h = ops.conv_temporal(h, kt)
        h = ops.channelwise_mul(h, cw)
        h = ops.maxpool3d(h, (3, 3, 3))
        a, bb = ops.split_channels(h, 0.5)
        h = ops.concat_channels([bb, a])
        h = ops.add(h, x)
        h = ops.avgpool_hw2(h)
        feats = ops.global_avg_pool(h)
        logits = ops.linear(feats, wlin, blin)
        return losses.cross_entropy(logits, labels)

    leaves = [x, ks.weights, kt.weights, bn.gamma, bn.beta, cw, wlin, blin]
    worst = max(worst, _fd_max_err(net_loss, leaves, rng, n_probes=40))
    return worst, 1e-4


def check_finiteness(rng, fault=False):
    x = Tensor5(rng.normal(size=(2, 4, 4, 8, 8)))
    bn = ops.BatchNorm(4)
    y = ops.maxpool3d(ops.relu(bn(ops.conv_spatial(
        x, ops.SpatialKernel.create(4, 4, 3, rng)), train=True)), (3, 3, 3))
    return (0.0 if np.isfinite(y.data).all() else 1.0), 0.5


# ---------------------------------------------------------------------------
# fusion checks
# ---------------------------------------------------------------------------


def check_grouping_identity(rng, fault=False):
    x = Tensor5(rng.normal(size=(2, 12, 2, 3, 3)))
    y = fusion.apply(fusion.make_grouping(4, 3), x).data
    return float(np.abs(y - x.data).max()), 0.0


def check_dropout_gather(rng, fault=False):
    g, c = 3, 6
    s = c // g
    x = Tensor5(rng.normal(size=(2, g * c, 2, 3, 3)))
    y = fusion.apply(fusion.make_dropout(g, c), x).data.reshape(2, g, c, 2, 3, 3)
    xg = x.data.reshape(2, g, c, 2, 3, 3)
    want = np.concatenate([xg[:, j, j * s:(j + 1) * s] for j in range(g)], axis=1)
    dev = max(float(np.abs(y[:, i] - want).max()) for i in range(g))
    return dev, 0.0


def check_shuffle_permutation(rng, fault=False):
    dev = 0.0
    for g, c in [(2, 2), (3, 3), (3, 6), (4, 4), (4, 16)]:
        x = Tensor5(rng.normal(size=(1, g * c, 2, 2, 2)))
        via_t = fusion.apply(fusion.make_shuffle(g, c), x).data
        via_p = fusion.apply_permutation(x, fusion.shuffle_permutation(g, c))
        dev = max(dev, float(np.abs(via_t - via_p).max()))
    return dev, 0.0


def check_shuffle_multiset(rng, fault=False):
    x = Tensor5(rng.normal(size=(2, 16, 2, 3, 3)))
    y = fusion.apply(fusion.make_shuffle(4, 4), x).data
    dev = float(np.abs(np.sort(y, axis=1) - np.sort(x.data, axis=1)).max())
    return dev, 0.0


def check_reshape_roundtrip(rng, fault=False):
    w = rng.normal(size=(4, 16))
    back = fusion.to_w(fusion.reshape_from_w(w, 4))
    return float(np.abs(back - w).max()), 0.0


def check_ir_counts(rng, fault=False):
    dev = 0.0
    for g, c in [(2, 2), (3, 6), (4, 4)]:
        dev = max(dev, float(fusion.ir_interactions(fusion.make_grouping(g, c))))
        got = fusion.ir_interactions(fusion.make_shuffle(g, c))
        dev = max(dev, float(abs(got - (g - 1) * c)))
    return dev, 0.5


def check_softmax_l1(rng, fault=False):
    fm = fusion.FusionMatrix(3, 6, weights=rng.normal(size=(3, 3, 6)))
    l1 = fusion.l1_importance(fusion.softmax_k(fm))
    if (l1 <= 0).any():
        return 1.0, 0.5
    return float(np.abs(l1 - fm.c / fm.G).max()), 1e-12


def check_fusion_apply_oracle(rng, fault=False):
    fm = fusion.FusionMatrix(3, 4, weights=rng.normal(size=(3, 3, 4)))
    x = Tensor5(rng.normal(size=(2, 12, 2, 3, 3)))
    got = fusion.apply(fm, x).data
    xg = x.data.reshape(2, 3, 4, 2, 3, 3)
    want = np.einsum("ijk,njkthw->nikthw", fm.weights.data, xg).reshape(got.shape)
    return float(np.abs(got - want).max()), 1e-12


# ---------------------------------------------------------------------------
# synthesizer checks
# ---------------------------------------------------------------------------


def check_residual_identity(rng, fault=False):
    block = synthesizer.SynthesizerBlock(synthesizer.SynthesizerConfig(16), seed=0)
    dev = 0.0
    for _ in range(5):
        u = Tensor5(rng.standard_normal((2, 16, 5, 6, 6)))
        z = block.forward(u)
        dev = max(dev, float(np.abs(z.data - u.data).max()))
    return dev, 0.0


def check_shape_preservation(rng, fault=False):
    cases = [(16, dict()), (12, dict(max_spatial_rfs=5, max_temporal_rfs=7,
                                     use_maxpool_branch=False))]
    dev = 0.0
    for c, kw in cases:
        cfg = synthesizer.SynthesizerConfig(c, init_policy="uniform", **kw)
        block = synthesizer.SynthesizerBlock(cfg, seed=1)
        u = Tensor5(rng.standard_normal((1, c, 5, 6, 6)))
        z = block.forward(u)
        dev = max(dev, 0.0 if z.shape == u.shape else 1.0)
    return dev, 0.5


def check_block_receptive_bound(rng, fault=False):
    cfg = synthesizer.SynthesizerConfig(6, max_spatial_rfs=5, max_temporal_rfs=5,
                                        use_maxpool_branch=False,
                                        init_policy="uniform")
    block = synthesizer.SynthesizerBlock(cfg, seed=2)
    t, h, w = 11, 13, 13
    u = np.zeros((1, 6, t, h, w))
    u[0, :, t // 2, h // 2, w // 2] = 1.0
    v = block.forward(Tensor5(u), bypass_bn=True, disable_relu=True,
                      include_residual=False).data
    nz = np.argwhere(np.abs(v).sum(axis=(0, 1)) > 0)
    overflow = 0
    for axis, half in ((0, 2), (1, 2), (2, 2)):
        centre = (t, h, w)[axis] // 2
        overflow = max(overflow,
                       int(max(0, centre - nz[:, axis].min() - half)),
                       int(max(0, nz[:, axis].max() - centre - half)))
    return float(overflow), 0.5


def check_fusion_equivalence(rng, fault=False):
    cfg = synthesizer.SynthesizerConfig(16, init_policy="uniform")
    block = synthesizer.SynthesizerBlock(cfg, seed=3)
    block.fusion = fusion.make_shuffle(4, 4)
    u = Tensor5(rng.standard_normal((2, 16, 4, 6, 6)))
    taps: dict = {}
    block.forward(u, taps=taps)
    want = fusion.apply_permutation(taps["spatial_concat"],
                                    fusion.shuffle_permutation(4, 4))
    return float(np.abs(taps["fusion_output"].data - want).max()), 0.0


def check_zero_init_gradient_flow(rng, fault=False):
    block = synthesizer.SynthesizerBlock(synthesizer.SynthesizerConfig(16), seed=4)
    u = Tensor5(rng.standard_normal((2, 16, 4, 6, 6)))
    with GradTape() as tape:
        loss = _sum_all(block.forward(u, train=True))
    tape.backward(loss)
    g_t = np.abs(tape.grad(block.fusion.weights)).max()
    g_wp = np.abs(tape.grad(block.w_prime)).max()
    # want: routing gradient alive, temporal-scale gradient exactly zero
    dev = (0.0 if g_t > 1e-12 else 1.0) + float(g_wp)
    return dev, 1e-12


# ---------------------------------------------------------------------------
# loss checks
# ---------------------------------------------------------------------------


def check_interaction_bounds(rng, fault=False):
    dev = 0.0
    zero = float(losses.interaction_loss(fusion.FusionMatrix(3, 4)).data)
    dev = max(dev, abs(zero + 0.5))
    for _ in range(5):
        fm = fusion.FusionMatrix(2, 3, weights=rng.normal(size=(2, 2, 3)))
        v = float(losses.interaction_loss(fm).data)
        if not (-1.0 < v <= -0.5):
            dev = max(dev, 1.0)
    return dev, 1e-12


def check_capacity_decomposition(rng, fault=False):
    g = 4
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
    return abs(v - (1.0 / g + off / g ** 2)), 1e-10


def check_loss_gradients(rng, fault=False):
    fm = fusion.FusionMatrix(2, 2, weights=rng.uniform(0.2, 0.9, (2, 2, 2))
                             * rng.choice([-1, 1], (2, 2, 2)))
    y = Tensor5(rng.uniform(0.2, 1.2, size=(2, 4, 2, 2, 2)), True)
    logits = Tracked(rng.normal(size=(3, 4)), True)
    labels = rng.integers(0, 4, size=3)
    lw = losses.LossWeights()

    def make():
        return losses.total_loss(losses.cross_entropy(logits, labels),
                                 [losses.interaction_loss(fm)],
                                 [losses.capacity_loss(y, 2)], lw)

    worst = _fd_max_err(make, [fm.weights, y, logits], rng, n_probes=40)
    return worst, 1e-4


def check_interaction_descent(rng, fault=False):
    fm = fusion.FusionMatrix(2, 4, weights=rng.uniform(0.05, 0.2, (2, 2, 4))
                             * rng.choice([-1, 1], (2, 2, 4)))
    mins = []
    for _ in range(10):
        mins.append(fusion.l1_importance(fm).min())
        with GradTape() as tape:
            l = losses.interaction_loss(fm)
        tape.backward(l)
        fm.weights.data -= 0.5 * tape.grad(fm.weights)
    ok = all(b > a for a, b in zip(mins, mins[1:]))
    return (0.0 if ok else 1.0), 0.5


# ---------------------------------------------------------------------------
# approximation-lab checks
# ---------------------------------------------------------------------------


def check_rank1_random(rng, fault=False):
    worst = 0.0
    for g in (1, 2, 4):
        for _ in range(5):
            wt, ws, u, sp, tp = approx.random_separable_instance(
                rng, g, 2, (1, 2, 4, 4, 4))
            worst = max(worst, approx.check_rank1_equivalence(wt, ws, u, sp, tp))
    return worst, 1e-10


def check_stacked_receptive_fields(rng, fault=False):
    dev = 0
    for n in (1, 2, 3):
        got = approx.measure_receptive_field([approx.ConvStage((3, 3, 3))] * n)
        dev = max(dev, max(abs(g - (2 * n + 1)) for g in got))
    got = approx.measure_receptive_field([approx.ConvStage((1, 3, 3), (1, 2, 2))])
    dev = max(dev, max(abs(a - b) for a, b in zip(got, (1, 5, 5))))
    return float(dev), 0.5


def check_multiscale_reduction(rng, fault=False):
    c = 2
    kernels = [rng.normal(size=(c, c, k, k, k)) for k in (1, 3)]
    weights = [np.zeros(c), np.ones(c)]
    u = rng.normal(size=(1, c, 4, 4, 4))
    got = approx.eval_form(approx.MultiScaleSum(kernels, weights), u)
    want = approx.eval_form(approx.LargeKernel(kernels[1]), u)
    return float(np.abs(got - want).max()), 0.0


def check_grouped_equals_constrained_multiscale(rng, fault=False):
    g, cg = 2, 2
    c = g * cg
    grouped = [rng.normal(size=(cg, cg, k, k, k)) for k in (1, 3)]
    dense, weights = [], []
    for i, k in enumerate((1, 3)):
        full = np.zeros((c, c, k, k, k))
        full[i * cg:(i + 1) * cg, i * cg:(i + 1) * cg] = grouped[i]
        dense.append(full)
        mask = np.zeros(c)
        mask[i * cg:(i + 1) * cg] = 1.0
        weights.append(mask)
    u = rng.normal(size=(1, c, 3, 4, 4))
    a = approx.eval_form(approx.GroupedMultiScale(grouped), u)
    b = approx.eval_form(approx.MultiScaleSum(dense, weights), u)
    return float(np.abs(a - b).max()), 1e-12


def check_param_counts(rng, fault=False):
    p, _ = approx.count_params_flops("large", c=4, l=5)
    dev = abs(p - 4 * 4 * 5 * 5 * 5)
    p1, _ = approx.count_params_flops("large", c=4, l=1)
    dev = max(dev, abs(p1 - 16))
    return float(dev), 0.5


CHECKS = [
    ("tensor-core", "conv_linearity", check_conv_linearity),
    ("tensor-core", "temporal_linearity", check_temporal_linearity),
    ("tensor-core", "impulse_support", check_impulse_support),
    ("tensor-core", "split_concat_roundtrip", check_split_concat_roundtrip),
    ("tensor-core", "finite_difference_gradients", check_fd_gradients),
    ("tensor-core", "finiteness", check_finiteness),
    ("fusion", "grouping_identity", check_grouping_identity),
    ("fusion", "dropout_gather", check_dropout_gather),
    ("fusion", "shuffle_permutation", check_shuffle_permutation),
    ("fusion", "shuffle_multiset", check_shuffle_multiset),
    ("fusion", "reshape_roundtrip", check_reshape_roundtrip),
    ("fusion", "ir_interaction_counts", check_ir_counts),
    ("fusion", "softmax_l1_positive", check_softmax_l1),
    ("fusion", "apply_oracle", check_fusion_apply_oracle),
    ("synthesizer", "residual_identity", check_residual_identity),
    ("synthesizer", "shape_preservation", check_shape_preservation),
    ("synthesizer", "receptive_field_bound", check_block_receptive_bound),
    ("synthesizer", "fusion_equivalence", check_fusion_equivalence),
    ("synthesizer", "zero_init_gradient_flow", check_zero_init_gradient_flow),
    ("losses", "interaction_bounds", check_interaction_bounds),
    ("losses", "capacity_decomposition", check_capacity_decomposition),
    ("losses", "loss_gradients_fd", check_loss_gradients),
    ("losses", "interaction_descent", check_interaction_descent),
    ("approx-lab", "rank1_equivalence", check_rank1_random),
    ("approx-lab", "receptive_fields", check_stacked_receptive_fields),
    ("approx-lab", "multiscale_reduction", check_multiscale_reduction),
    ("approx-lab", "grouped_vs_multiscale", check_grouped_equals_constrained_multiscale),
    ("approx-lab", "param_counts", check_param_counts),
]


def run_checks(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    results = []
    for form, name, fn in CHECKS:
        rng = np.random.default_rng(np.random.SeedSequence((seed, hashname(name))))
        fault = inject_fault and name == "conv_linearity"
        dev, thr = fn(rng, fault=fault)
        results.append(CheckResult(form, name, float(dev), float(thr),
                                   float(dev) <= float(thr)))
    return results


def hashname(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2 ** 31)
