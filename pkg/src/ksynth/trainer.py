"""SGD training loop, evaluation, the receptive-field grid search, and the
regulariser direction study.

Determinism contract: all randomness (batch order, dropout masks) comes
from one generator seeded by the config, gradients accumulate in a fixed
parameter order, and log lines are formatted identically run to run, so a
repeated run reproduces the training log byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fusion as fusion_mod
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .io import save_arrays
from .losses import LossWeights, capacity_loss, cross_entropy, total_loss
from .losses import interaction_loss
from .network import ToyNetwork, build_network
from .tensor import GradTape, Param, Tensor5

LOG_HEADER = "epoch,cls,interaction,capacity,total,val_top1"


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (20, 25)
    epochs: int = 30
    batch_size: int = 16
    alpha: float = 0.01
    beta: float = 0.001
    insert_stages: tuple[int, ...] = (1, 2, 3, 4)
    feature_proportion: float = 0.25
    dropout: float = 0.3
    seed: int = 0
    stop_at_val_top1: float | None = None
    max_spatial_rfs: int = 5
    max_temporal_rfs: int = 5
    use_maxpool_branch: bool = True
    use_dilation: bool = True
    inter_relu: bool = True
    decomposition: str = "sep2plus1"
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stem_channels: int = 8

    def synth_dict(self) -> dict:
        return dict(max_spatial_rfs=self.max_spatial_rfs,
                    max_temporal_rfs=self.max_temporal_rfs,
                    use_maxpool_branch=self.use_maxpool_branch,
                    use_dilation=self.use_dilation,
                    inter_relu=self.inter_relu,
                    decomposition=self.decomposition)


def network_from_config(cfg: TrainConfig, num_classes: int) -> ToyNetwork:
    return build_network(stage_channels=cfg.stage_channels,
                         stem_channels=cfg.stem_channels,
                         insert_stages=cfg.insert_stages,
                         synth_cfg=cfg.synth_dict(),
                         feature_proportion=cfg.feature_proportion,
                         num_classes=num_classes, dropout_rate=cfg.dropout,
                         seed=cfg.seed)


class SGD:
    """Plain momentum SGD: v = mu*v + g; w -= lr*v.  Fixed parameter order."""

    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = {p.uid: np.zeros_like(p.data) for p in self.params}

    def step(self, tape: GradTape) -> None:
        for p in self.params:
            g = tape.grad(p)
            v = self._vel[p.uid]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(net: ToyNetwork, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          log_path=None) -> dict:
    """Returns {"log": [csv rows], "val_top1": last, "epochs_run": k}."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7124)))
    opt = SGD(net.params(), cfg.lr, cfg.momentum)
    weights = LossWeights(cfg.alpha, cfg.beta)
    rows = [LOG_HEADER]
    val_top1 = 0.0
    epochs_run = 0
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr * cfg.lr_decay ** sum(epoch > e for e in cfg.decay_epochs)
        sums = np.zeros(4)
        n_batches = 0
        for idx in _batches(len(train_ds), cfg.batch_size, rng):
            x = Tensor5(train_ds.clips[idx])
            y = train_ds.labels[idx]
            with GradTape() as tape:
                taps: dict = {}
                logits = net.forward(x, train=True, rng=rng, taps=taps)
                cls = cross_entropy(logits, y)
                inters = [interaction_loss(net.blocks[s].fusion)
                          for s in sorted(net.blocks)]
                caps = [capacity_loss(taps[s]["fusion_output"],
                                      net.blocks[s].config.g_temporal)
                        for s in sorted(net.blocks)]
                total = total_loss(cls, inters, caps, weights)
            if not np.isfinite(float(total.data)):
                raise DivergenceError(
                    f"non-finite total loss at epoch {epoch} "
                    f"(cls={float(cls.data)}, lr={opt.lr})")
            tape.backward(total)
            opt.step(tape)
            sums += [float(cls.data),
                     float(np.mean([float(t.data) for t in inters])) if inters else 0.0,
                     float(np.mean([float(t.data) for t in caps])) if caps else 0.0,
                     float(total.data)]
            n_batches += 1
        avg = sums / max(n_batches, 1)
        val_top1, _ = evaluate(net, val_ds, cfg.batch_size)
        rows.append(f"{epoch},{avg[0]:.12g},{avg[1]:.12g},{avg[2]:.12g},"
                    f"{avg[3]:.12g},{val_top1:.12g}")
        epochs_run = epoch
        if cfg.stop_at_val_top1 is not None and val_top1 >= cfg.stop_at_val_top1:
            break
    if log_path is not None:
        Path(log_path).write_text("\n".join(rows) + "\n")
    return {"log": rows, "val_top1": val_top1, "epochs_run": epochs_run}


def evaluate(net: ToyNetwork, ds: Dataset, batch_size: int = 32):
    """Top-1 accuracy plus per-class accuracies, eval mode, deterministic."""
    correct = np.zeros(ds.num_classes)
    count = np.zeros(ds.num_classes)
    for i in range(0, len(ds), batch_size):
        x = Tensor5(ds.clips[i:i + batch_size])
        y = ds.labels[i:i + batch_size]
        pred = net.forward(x, train=False).data.argmax(axis=1)
        for cls in range(ds.num_classes):
            m = y == cls
            count[cls] += m.sum()
            correct[cls] += (pred[m] == cls).sum()
    per_class = {c: (correct[c] / count[c] if count[c] else 0.0)
                 for c in range(ds.num_classes)}
    top1 = correct.sum() / max(count.sum(), 1)
    return float(top1), per_class


def save_checkpoint(net: ToyNetwork, directory) -> None:
    save_arrays(directory, net.named_arrays())


# ---------------------------------------------------------------------------
# grid search over maximum receptive fields
# ---------------------------------------------------------------------------


def grid_search_rfs(candidates, base_cfg: TrainConfig, train_ds: Dataset,
                    val_ds: Dataset) -> list[dict]:
    """Train one model per (max_spatial, max_temporal, pool) candidate with a
    shared seed; returns rows sorted by accuracy (descending)."""
    if not candidates:
        raise ConfigError("grid search needs at least one candidate")
    rows = []
    for cand in candidates:
        ms, mt, pool = cand
        cfg = replace(base_cfg, max_spatial_rfs=ms, max_temporal_rfs=mt,
                      use_maxpool_branch=bool(pool))
        net = network_from_config(cfg, train_ds.num_classes)
        out = train(net, train_ds, val_ds, cfg)
        rows.append({"spatial": ms, "temporal": mt, "pool": bool(pool),
                     "val_top1": out["val_top1"], "epochs": out["epochs_run"]})
    rows.sort(key=lambda r: (-r["val_top1"], r["spatial"], r["temporal"]))
    return rows


# ---------------------------------------------------------------------------
# regulariser direction study
# ---------------------------------------------------------------------------


def mean_ir_interactions(net: ToyNetwork, eps: float = 1e-6) -> float:
    vals = [fusion_mod.ir_interactions(net.blocks[s].fusion, eps)
            for s in sorted(net.blocks)]
    return float(np.mean(vals)) if vals else 0.0


def mean_offdiag_cosine(net: ToyNetwork, ds: Dataset, batch_size: int = 32) -> float:
    """Mean cosine between distinct pooled fusion-output groups, over all
    inserted blocks, measured in eval mode on the given clips."""
    per_block: dict[int, list[float]] = {s: [] for s in net.blocks}
    for i in range(0, len(ds), batch_size):
        x = Tensor5(ds.clips[i:i + batch_size])
        taps: dict = {}
        net.forward(x, train=False, taps=taps)
        for s in net.blocks:
            y = taps[s]["fusion_output"].data
            g = net.blocks[s].config.g_temporal
            n, ch = y.shape[:2]
            u = y.mean(axis=(2, 3, 4)).reshape(n, g, ch // g)
            norms = np.maximum(np.linalg.norm(u, axis=2), 1e-12)
            cos = np.einsum("nic,njc->nij", u, u) / (norms[:, :, None] * norms[:, None, :])
            off = (cos.sum(axis=(1, 2)) - np.einsum("nii->n", cos)) / (g * g - g)
            per_block[s].extend(off.tolist())
    means = [np.mean(v) for v in per_block.values() if v]
    return float(np.mean(means)) if means else 0.0


def regularizer_direction_study(train_ds: Dataset, val_ds: Dataset,
                                base_cfg: TrainConfig) -> dict:
    """Four runs differing only in one loss weight each.

    alpha pair: identical seeds, alpha in {base, 0}; compares the mean
    ir-interactions of the routing matrices.  beta pair: beta in {base, 0};
    compares the mean off-diagonal pooled-group cosine on the val clips.
    """
    def run(**overrides):
        cfg = replace(base_cfg, **overrides)
        net = network_from_config(cfg, train_ds.num_classes)
        train(net, train_ds, val_ds, cfg)
        return net

    net_base = run()  # serves as the alpha-on and beta-on arm
    net_alpha_off = run(alpha=0.0)
    net_beta_off = run(beta=0.0)
    return {
        "ir_alpha_on": mean_ir_interactions(net_base),
        "ir_alpha_off": mean_ir_interactions(net_alpha_off),
        "cos_beta_on": mean_offdiag_cosine(net_base, val_ds),
        "cos_beta_off": mean_offdiag_cosine(net_beta_off, val_ds),
    }
