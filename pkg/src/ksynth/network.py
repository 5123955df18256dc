"""A small residual 2-D backbone with synthesizer insertions and a
frame-average head.

Every backbone convolution is spatial (temporal extent 1), so without
inserted blocks the network treats frames independently; global average
pooling over (T, H, W) before the linear classifier is then exactly the
frame-average prediction rule.  Each stage halves the spatial resolution
with a 2x2 mean pool and doubles the channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .synthesizer import SynthesizerBlock, SynthesizerConfig, split_enhance
from .tensor import Param, Tensor5, Tracked


class _ResidualStage:
    def __init__(self, c_in: int, c_out: int, rng, name: str):
        self.conv1 = ops.SpatialKernel.create(c_in, c_out, 3, rng, name=f"{name}.conv1")
        self.bn1 = ops.BatchNorm(c_out, name=f"{name}.bn1")
        self.conv2 = ops.SpatialKernel.create(c_out, c_out, 3, rng, name=f"{name}.conv2")
        self.bn2 = ops.BatchNorm(c_out, name=f"{name}.bn2")
        self.shortcut = ops.SpatialKernel.create(c_in, c_out, 1, rng,
                                                 name=f"{name}.shortcut")
        self.bn_s = ops.BatchNorm(c_out, name=f"{name}.bn_s")

    def params(self) -> list[Param]:
        return ([self.conv1.weights] + self.bn1.params()
                + [self.conv2.weights] + self.bn2.params()
                + [self.shortcut.weights] + self.bn_s.params())

    def bns(self):
        return [self.bn1, self.bn2, self.bn_s]

    def __call__(self, x: Tensor5, train: bool) -> Tensor5:
        x = ops.avgpool_hw2(x)
        h = ops.relu(self.bn1(ops.conv_spatial(x, self.conv1), train))
        h = self.bn2(ops.conv_spatial(h, self.conv2), train)
        s = self.bn_s(ops.conv_spatial(x, self.shortcut), train)
        return ops.relu(ops.add(h, s))


class ToyNetwork:
    """Stem + S residual stages + optional synthesizer blocks + linear head."""

    def __init__(self, stage_channels=(16, 32, 64, 128), stem_channels: int = 8,
                 in_channels: int = 1, num_classes: int = 4,
                 insert_stages=(), synth_cfg: dict | None = None,
                 feature_proportion: float = 0.25, dropout_rate: float = 0.3,
                 seed: int = 0):
        insert_stages = tuple(sorted(insert_stages))
        n_stages = len(stage_channels)
        for s in insert_stages:
            if not 1 <= s <= n_stages:
                raise ConfigError(f"insertion stage {s} outside 1..{n_stages}")
        # the backbone stream is independent of the insertion set, so two
        # networks sharing a seed share 2-D weights regardless of blocks
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0)))
        self.stem = ops.SpatialKernel.create(in_channels, stem_channels, 3, rng,
                                             name="stem.conv")
        self.bn_stem = ops.BatchNorm(stem_channels, name="stem.bn")
        self.stages = []
        c_prev = stem_channels
        for i, c in enumerate(stage_channels, start=1):
            self.stages.append(_ResidualStage(c_prev, c, rng, f"stage{i}"))
            c_prev = c
        self.head_w = Param(rng.normal(0, np.sqrt(1.0 / c_prev),
                                       size=(num_classes, c_prev)), name="head.w")
        self.head_b = Param(np.zeros(num_classes), name="head.b")

        self.feature_proportion = feature_proportion
        self.dropout_rate = dropout_rate
        self.insert_stages = insert_stages
        self.num_classes = num_classes
        self.blocks: dict[int, SynthesizerBlock] = {}
        synth_cfg = dict(synth_cfg or {})
        synth_cfg.pop("channels", None)
        for s in insert_stages:
            enhanced = feature_proportion * stage_channels[s - 1]
            if abs(enhanced - round(enhanced)) > 1e-9:
                raise ConfigError(
                    f"proportion {feature_proportion} of stage {s} "
                    f"({stage_channels[s - 1]} ch) is not integral")
            cfg = SynthesizerConfig(channels=int(round(enhanced)),
                                    feature_proportion=feature_proportion,
                                    **synth_cfg)
            self.blocks[s] = SynthesizerBlock(cfg, seed=seed * 1009 + s)

    # -- parameters -----------------------------------------------------------

    def params(self) -> list[Param]:
        ps = [self.stem.weights] + self.bn_stem.params()
        for st in self.stages:
            ps += st.params()
        for s in sorted(self.blocks):
            ps += self.blocks[s].params()
        ps += [self.head_w, self.head_b]
        return ps

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        rows = [("stem.conv", self.stem.weights.data),
                ("stem.bn.gamma", self.bn_stem.gamma.data),
                ("stem.bn.beta", self.bn_stem.beta.data),
                ("stem.bn.running_mean", self.bn_stem.running_mean),
                ("stem.bn.running_var", self.bn_stem.running_var)]
        for i, st in enumerate(self.stages, start=1):
            for p in st.params():
                rows.append((p.name, p.data))
            for j, bn in enumerate(st.bns()):
                rows.append((f"stage{i}.bn{j}.running_mean", bn.running_mean))
                rows.append((f"stage{i}.bn{j}.running_var", bn.running_var))
        for s in sorted(self.blocks):
            for name, arr in self.blocks[s].named_arrays():
                rows.append((f"block{s}.{name}", arr))
        rows.append(("head.w", self.head_w.data))
        rows.append(("head.b", self.head_b.data))
        return rows

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.stem.weights.data[...] = arrays["stem.conv"]
        self.bn_stem.gamma.data[...] = arrays["stem.bn.gamma"]
        self.bn_stem.beta.data[...] = arrays["stem.bn.beta"]
        self.bn_stem.running_mean[...] = arrays["stem.bn.running_mean"]
        self.bn_stem.running_var[...] = arrays["stem.bn.running_var"]
        for i, st in enumerate(self.stages, start=1):
            for p in st.params():
                p.data[...] = arrays[p.name]
            for j, bn in enumerate(st.bns()):
                bn.running_mean[...] = arrays[f"stage{i}.bn{j}.running_mean"]
                bn.running_var[...] = arrays[f"stage{i}.bn{j}.running_var"]
        for s in sorted(self.blocks):
            prefix = f"block{s}."
            sub = {k[len(prefix):]: v for k, v in arrays.items()
                   if k.startswith(prefix)}
            self.blocks[s].load_arrays(sub)
        self.head_w.data[...] = arrays["head.w"]
        self.head_b.data[...] = arrays["head.b"]

    # -- evaluation -----------------------------------------------------------

    def forward(self, x: Tensor5, train: bool = False,
                rng: np.random.Generator | None = None,
                taps: dict | None = None) -> Tracked:
        h = ops.relu(self.bn_stem(ops.conv_spatial(x, self.stem), train))
        for s, stage in enumerate(self.stages, start=1):
            h = stage(h, train)
            if s in self.blocks:
                block_taps: dict | None = {} if taps is not None else None
                h = split_enhance(h, self.feature_proportion, self.blocks[s],
                                  train=train, taps=block_taps)
                if taps is not None:
                    taps[s] = block_taps
        feats = ops.global_avg_pool(h)
        if train and rng is not None and self.dropout_rate > 0:
            feats = ops.dropout(feats, self.dropout_rate, rng, train=True)
        return ops.linear(feats, self.head_w, self.head_b)


def build_network(stage_channels=(16, 32, 64, 128), stem_channels: int = 8,
                  insert_stages=(), synth_cfg: dict | None = None,
                  feature_proportion: float = 0.25, num_classes: int = 4,
                  dropout_rate: float = 0.3, seed: int = 0,
                  in_channels: int = 1) -> ToyNetwork:
    return ToyNetwork(stage_channels=tuple(stage_channels),
                      stem_channels=stem_channels, in_channels=in_channels,
                      num_classes=num_classes, insert_stages=tuple(insert_stages),
                      synth_cfg=synth_cfg, feature_proportion=feature_proportion,
                      dropout_rate=dropout_rate, seed=seed)
