"""The synthesizer block: multi-scale spatial kernels, the fusion layer,
multi-scale temporal kernels, and a residual connection.

Forward pipeline on a C-channel input U:

    split U into g_s groups
    per branch: spatial conv (or 3x3x3 max-pool + 1x1x1 conv), BN, ReLU
    fusion: Y = T x X  (routes g_s groups to g_t groups)
    optional intermediate ReLU
    per branch: temporal conv (or max-pool + 1x1x1 conv), output scaled by W'
    z = V + U

The routing weights start at zero, so a freshly built block is the exact
identity; the temporal-side scale W' starts at ones so gradients reach the
routing weights from the first step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fusion as fusion_mod
from . import ops
from .errors import ConfigError, DimensionError
from .io import load_arrays, save_arrays
from .tensor import Param, Tensor5

POOL_WINDOW = (3, 3, 3)


def kernel_bag(max_rfs: int) -> tuple[int, ...]:
    """Odd sizes {1, 3, ..., max_rfs}."""
    if max_rfs < 1 or max_rfs % 2 == 0:
        raise ConfigError(f"maximum receptive field must be odd and >= 1, got {max_rfs}")
    return tuple(range(1, max_rfs + 1, 2))


@dataclass(frozen=True)
class SynthesizerConfig:
    channels: int
    max_spatial_rfs: int = 5
    max_temporal_rfs: int = 5
    feature_proportion: float = 0.25
    use_maxpool_branch: bool = True
    use_dilation: bool = True
    inter_relu: bool = True
    decomposition: str = "sep2plus1"       # or "sep1plus1plus1"
    init_policy: str = "zero"              # or "uniform" (linear probes)
    spatial_sizes: tuple[int, ...] | None = None   # override the derived bag
    temporal_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.decomposition not in ("sep2plus1", "sep1plus1plus1"):
            raise ConfigError(f"unknown decomposition {self.decomposition!r}")
        if self.init_policy not in ("zero", "uniform"):
            raise ConfigError(f"unknown init policy {self.init_policy!r}")
        if not (0.0 < self.feature_proportion <= 1.0):
            raise ConfigError(
                f"feature proportion must be in (0, 1], got {self.feature_proportion}")
        for g, side in ((self.g_spatial, "spatial"), (self.g_temporal, "temporal")):
            if self.channels % g:
                raise ConfigError(
                    f"C={self.channels} not divisible by the {side} branch count {g}")

    @property
    def spatial_bag(self) -> tuple[int, ...]:
        return self.spatial_sizes or kernel_bag(self.max_spatial_rfs)

    @property
    def temporal_bag(self) -> tuple[int, ...]:
        return self.temporal_sizes or kernel_bag(self.max_temporal_rfs)

    @property
    def g_spatial(self) -> int:
        return len(self.spatial_bag) + (1 if self.use_maxpool_branch else 0)

    @property
    def g_temporal(self) -> int:
        return len(self.temporal_bag) + (1 if self.use_maxpool_branch else 0)

    @property
    def c_spatial(self) -> int:
        return self.channels // self.g_spatial

    @property
    def c_temporal(self) -> int:
        return self.channels // self.g_temporal


def _realize(size: int, use_dilation: bool) -> tuple[int, int]:
    """(kernel size, dilation) for a target receptive field."""
    if use_dilation and size > 3:
        return 3, (size - 1) // 2
    return size, 1


class _SpatialBranch:
    """One spatial branch: conv(s) or pool, then BN and ReLU."""

    def __init__(self, c: int, size: int | None, cfg: SynthesizerConfig, rng,
                 name: str):
        self.is_pool = size is None
        self.kernels: list[ops.SpatialKernel] = []
        if self.is_pool:
            self.kernels.append(ops.SpatialKernel.create(c, c, 1, rng,
                                                         name=f"{name}.post_pool"))
        elif cfg.decomposition == "sep1plus1plus1" and size > 1:
            k, d = _realize(size, cfg.use_dilation)
            wh = ops._kernel_param(c, c, (1, k, 1), rng, f"{name}.h")
            ww = ops._kernel_param(c, c, (1, 1, k), rng, f"{name}.w")
            self._pair = ((wh, (1, d, 1)), (ww, (1, 1, d)))
        else:
            k, d = _realize(size, cfg.use_dilation)
            self.kernels.append(ops.SpatialKernel.create(c, c, k, rng, dilation=d,
                                                         name=f"{name}.conv"))
        self.bn = ops.BatchNorm(c, name=f"{name}.bn")
        self._decomposed = (not self.is_pool and cfg.decomposition == "sep1plus1plus1"
                            and size is not None and size > 1)

    def params(self) -> list[Param]:
        ps: list[Param] = []
        if self._decomposed:
            ps += [self._pair[0][0], self._pair[1][0]]
        else:
            ps += [k.weights for k in self.kernels]
        return ps + self.bn.params()

    def __call__(self, x: Tensor5, train: bool, bypass_bn: bool,
                 disable_relu: bool) -> Tensor5:
        if self.is_pool:
            y = ops.maxpool3d(x, POOL_WINDOW)
            y = ops.conv_spatial(y, self.kernels[0])
        elif self._decomposed:
            (wh, dh), (ww, dw) = self._pair
            y = ops.conv5d(x, wh, dilation=dh)
            y = ops.conv5d(y, ww, dilation=dw)
        else:
            y = ops.conv_spatial(x, self.kernels[0])
        if not bypass_bn:
            y = self.bn(y, train)
        if not disable_relu:
            y = ops.relu(y)
        return y


class _TemporalBranch:
    """One temporal branch: conv or pool + 1x1x1; no BN, no ReLU."""

    def __init__(self, c_in: int, c_out: int, size: int | None,
                 cfg: SynthesizerConfig, rng, name: str):
        self.is_pool = size is None
        if self.is_pool:
            self.kernel = ops.TemporalKernel.create(c_in, c_out, 1, rng,
                                                    name=f"{name}.post_pool")
        else:
            k, d = _realize(size, cfg.use_dilation)
            self.kernel = ops.TemporalKernel.create(c_in, c_out, k, rng, dilation=d,
                                                    name=f"{name}.conv")

    def params(self) -> list[Param]:
        return [self.kernel.weights]

    def __call__(self, x: Tensor5) -> Tensor5:
        if self.is_pool:
            x = ops.maxpool3d(x, POOL_WINDOW)
        return ops.conv_temporal(x, self.kernel)


class SynthesizerBlock:
    """See module docstring.  ``seed`` fixes every randomly drawn weight."""

    def __init__(self, config: SynthesizerConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        cfg = config
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
        c_s, c_t = cfg.c_spatial, cfg.c_temporal
        sizes_s: list[int | None] = list(cfg.spatial_bag)
        sizes_t: list[int | None] = list(cfg.temporal_bag)
        if cfg.use_maxpool_branch:
            sizes_s.append(None)
            sizes_t.append(None)
        self.spatial = [_SpatialBranch(c_s, s, cfg, rng, f"spatial.{j}")
                        for j, s in enumerate(sizes_s)]
        self.fusion = fusion_mod.FusionMatrix(cfg.g_spatial, c_s,
                                              g_out=cfg.g_temporal, name="fusion")
        self.temporal = [_TemporalBranch(c_s, c_t, s, cfg, rng, f"temporal.{i}")
                         for i, s in enumerate(sizes_t)]
        self.w_prime = Param(np.ones(cfg.channels), name="w_prime")
        if cfg.init_policy == "uniform":
            self.fusion.weights.data[:] = rng.uniform(-0.5, 0.5,
                                                      self.fusion.weights.shape)
            self.w_prime.data[:] = rng.uniform(0.5, 1.5, cfg.channels)

    # -- parameter access ---------------------------------------------------

    def params(self) -> list[Param]:
        """Trainable parameters in a fixed order."""
        ps: list[Param] = []
        for br in self.spatial:
            ps += br.params()
        if self.fusion.trainable:
            ps.append(self.fusion.weights)
        for br in self.temporal:
            ps += br.params()
        ps.append(self.w_prime)
        return ps

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter and BN statistic, for serialization."""
        rows: list[tuple[str, np.ndarray]] = []
        for j, br in enumerate(self.spatial):
            for p in br.params():
                rows.append((p.name, p.data))
            rows.append((f"spatial.{j}.bn.running_mean", br.bn.running_mean))
            rows.append((f"spatial.{j}.bn.running_var", br.bn.running_var))
        rows.append(("fusion", self.fusion.weights.data))
        for br in self.temporal:
            rows.append((br.kernel.weights.name, br.kernel.weights.data))
        rows.append(("w_prime", self.w_prime.data))
        return rows

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for j, br in enumerate(self.spatial):
            for p in br.params():
                p.data[...] = arrays[p.name]
            br.bn.running_mean[...] = arrays[f"spatial.{j}.bn.running_mean"]
            br.bn.running_var[...] = arrays[f"spatial.{j}.bn.running_var"]
        self.fusion.weights.data[...] = arrays["fusion"]
        for br in self.temporal:
            br.kernel.weights.data[...] = arrays[br.kernel.weights.name]
        self.w_prime.data[...] = arrays["w_prime"]

    # -- evaluation ----------------------------------------------------------

    def forward(self, u: Tensor5, train: bool = False, taps: dict | None = None,
                bypass_bn: bool = False, disable_relu: bool = False,
                include_residual: bool = True) -> Tensor5:
        cfg = self.config
        if u.shape[1] != cfg.channels:
            raise DimensionError(
                f"block built for C={cfg.channels}, input has C={u.shape[1]}")
        groups_in = ops.split_groups(u, cfg.g_spatial)
        xs = [br(gx, train, bypass_bn, disable_relu)
              for br, gx in zip(self.spatial, groups_in)]
        x = ops.concat_channels(xs)
        if taps is not None:
            taps["spatial_concat"] = x
        y = fusion_mod.apply(self.fusion, x)
        if taps is not None:
            taps["fusion_output"] = y
        if cfg.inter_relu and not disable_relu:
            y = ops.relu(y)
        groups_mid = ops.split_groups(y, cfg.g_temporal)
        vs = [br(gy) for br, gy in zip(self.temporal, groups_mid)]
        v = ops.concat_channels(vs)
        v = ops.channelwise_mul(v, self.w_prime)
        if taps is not None:
            taps["pre_residual"] = v
        return ops.add(v, u) if include_residual else v


def zero_init(block: SynthesizerBlock, seed: int | None = None) -> None:
    """Restore the identity-at-insertion state: zero routing, unit temporal
    scale, freshly drawn kernels, reset BN."""
    seed = block.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
    for br in block.spatial:
        for p in br.params()[:-2]:  # kernel params precede gamma/beta
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / _fan_in(p.data.shape)),
                                     p.data.shape)
        br.bn.gamma.data[:] = 1.0
        br.bn.beta.data[:] = 0.0
        br.bn.running_mean[:] = 0.0
        br.bn.running_var[:] = 1.0
    if block.fusion.trainable:
        block.fusion.weights.data[:] = 0.0
    for br in block.temporal:
        w = br.kernel.weights
        w.data[...] = rng.normal(0.0, np.sqrt(2.0 / _fan_in(w.data.shape)),
                                 w.data.shape)
    block.w_prime.data[:] = 1.0


def _fan_in(shape) -> int:
    c_out, c_in_g, kt, kh, kw = shape
    return c_in_g * kt * kh * kw


def split_enhance(u: Tensor5, proportion: float, block: SynthesizerBlock,
                  train: bool = False, taps: dict | None = None) -> Tensor5:
    """Route the first proportion*C channels through the block; the rest pass
    through untouched."""
    c = u.shape[1]
    k = proportion * c
    if abs(k - round(k)) > 1e-9:
        raise ConfigError(f"proportion {proportion} of C={c} is not integral")
    k = int(round(k))
    if k == c:
        return block.forward(u, train=train, taps=taps)
    front = ops.narrow_channels(u, 0, k)
    rest = ops.narrow_channels(u, k, c)
    return ops.concat_channels([block.forward(front, train=train, taps=taps), rest])


# ---------------------------------------------------------------------------
# baseline variants
# ---------------------------------------------------------------------------

BASELINE_KINDS = ("RF-S", "RF-L", "RF-L-Inception", "RF-L-Inception-T")


def build_baseline_variant(kind: str, channels: int, seed: int = 0) -> SynthesizerBlock:
    """Frozen-fusion degenerate modes with their published feature proportions."""
    if kind == "RF-S":
        cfg = SynthesizerConfig(channels, max_spatial_rfs=3, max_temporal_rfs=3,
                                feature_proportion=1 / 6, use_maxpool_branch=False,
                                spatial_sizes=(3,), temporal_sizes=(3,))
        block = SynthesizerBlock(cfg, seed)
        block.fusion = _frozen_ones(1, channels)
    elif kind == "RF-L":
        cfg = SynthesizerConfig(channels, max_spatial_rfs=5, max_temporal_rfs=5,
                                feature_proportion=1 / 8, use_maxpool_branch=False,
                                spatial_sizes=(5,), temporal_sizes=(5,))
        block = SynthesizerBlock(cfg, seed)
        block.fusion = _frozen_ones(1, channels)
    elif kind == "RF-L-Inception":
        cfg = SynthesizerConfig(channels, max_spatial_rfs=5, max_temporal_rfs=5,
                                feature_proportion=1 / 4, use_maxpool_branch=True)
        block = SynthesizerBlock(cfg, seed)
        block.fusion = fusion_mod.make_grouping(cfg.g_spatial, cfg.c_spatial)
    elif kind == "RF-L-Inception-T":
        cfg = SynthesizerConfig(channels, max_spatial_rfs=1, max_temporal_rfs=5,
                                feature_proportion=1 / 4, use_maxpool_branch=False,
                                spatial_sizes=(1,), temporal_sizes=(1, 3, 5))
        block = SynthesizerBlock(cfg, seed)
        # the single spatial group feeds every temporal branch
        block.fusion = fusion_mod.FusionMatrix(
            1, channels, g_out=3, weights=np.ones((3, 1, channels)),
            trainable=False, name="ones")
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
    return block


def _frozen_ones(g: int, c: int) -> fusion_mod.FusionMatrix:
    return fusion_mod.FusionMatrix(g, c, weights=np.ones((g, g, c)),
                                   trainable=False, name="ones")


def save_block(block: SynthesizerBlock, directory) -> None:
    save_arrays(directory, block.named_arrays())


def load_block(block: SynthesizerBlock, directory) -> None:
    block.load_arrays(load_arrays(directory))
