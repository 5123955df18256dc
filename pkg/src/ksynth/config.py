"""Flat key=value run configuration.

One ``key=value`` pair per line, ``#`` comments, keys namespaced as
``train.lr`` / ``synth.max_spatial_rfs`` / ``data.n_train`` / ``net.*`` /
``grid.candidates``.  Unknown keys are rejected.  Every command writes the
resolved configuration back out as a snapshot for reproducibility.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p) for p in s.split(","))


def _parse_fraction(s: str) -> float:
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _parse_candidates(s: str) -> tuple:
    """Grid candidates like "3,3,nopool;5,5,pool"."""
    out = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = [b.strip() for b in part.split(",")]
        if len(bits) != 3 or bits[2] not in ("pool", "nopool"):
            raise ConfigError(f"bad grid candidate {part!r} "
                              "(want e.g. '5,5,pool')")
        out.append((int(bits[0]), int(bits[1]), bits[2] == "pool"))
    if not out:
        raise ConfigError("grid.candidates is empty")
    return tuple(out)


# key -> (parser, default)
KNOWN_KEYS = {
    "data.n_train": (int, 100),           # clips per class
    "data.n_val": (int, 50),
    "data.t": (int, 8),
    "data.h": (int, 32),
    "data.w": (int, 32),
    "data.noise_sigma": (float, 0.05),
    "train.lr": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.lr_decay": (float, 0.1),
    "train.decay_epochs": (_parse_int_tuple, (20, 25)),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 8),
    "train.alpha": (float, 0.01),
    "train.beta": (float, 0.001),
    "train.insert_stages": (_parse_int_tuple, (1, 2, 3, 4)),
    "train.feature_proportion": (_parse_fraction, 0.25),
    "train.dropout": (float, 0.3),
    "train.seed": (int, 0),
    "train.stop_at_val_top1": (float, -1.0),  # negative disables
    "synth.max_spatial_rfs": (int, 5),
    "synth.max_temporal_rfs": (int, 5),
    "synth.use_maxpool_branch": (_parse_bool, True),
    "synth.use_dilation": (_parse_bool, True),
    "synth.inter_relu": (_parse_bool, True),
    "synth.decomposition": (str, "sep2plus1"),
    "net.stage_channels": (_parse_int_tuple, (16, 32, 64, 128)),
    "net.stem_channels": (int, 8),
    "grid.candidates": (_parse_candidates,
                        ((3, 3, False), (5, 5, True), (5, 5, False),
                         (5, 7, False), (7, 7, False))),
    "grid.feature_proportion": (_parse_fraction, 0.75),
    "grid.epochs": (int, 10),
}


class RunConfig:
    """Resolved configuration: defaults overlaid with a config file."""

    def __init__(self, values: dict | None = None):
        self.values = {k: dflt for k, (_, dflt) in KNOWN_KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw) -> None:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, _ = KNOWN_KEYS[key]
        self.values[key] = parser(raw) if isinstance(raw, str) else raw

    def __getitem__(self, key: str):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def snapshot(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, tuple):
                if v and isinstance(v[0], tuple):  # grid candidates
                    v = ";".join(f"{a},{b},{'pool' if p else 'nopool'}"
                                 for a, b, p in v)
                else:
                    v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.snapshot").write_text(self.snapshot())


def load_config(path) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = body.split("=", 1)
        try:
            cfg.set(key.strip(), raw.strip())
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key.strip()!r}: {exc}")
    return cfg


def train_config_from(cfg: RunConfig, seed: int | None = None):
    from .trainer import TrainConfig

    stop = cfg["train.stop_at_val_top1"]
    return TrainConfig(
        lr=cfg["train.lr"], momentum=cfg["train.momentum"],
        lr_decay=cfg["train.lr_decay"], decay_epochs=cfg["train.decay_epochs"],
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        alpha=cfg["train.alpha"], beta=cfg["train.beta"],
        insert_stages=cfg["train.insert_stages"],
        feature_proportion=cfg["train.feature_proportion"],
        dropout=cfg["train.dropout"],
        seed=cfg["train.seed"] if seed is None else seed,
        stop_at_val_top1=None if stop is None or stop < 0 else stop,
        max_spatial_rfs=cfg["synth.max_spatial_rfs"],
        max_temporal_rfs=cfg["synth.max_temporal_rfs"],
        use_maxpool_branch=cfg["synth.use_maxpool_branch"],
        use_dilation=cfg["synth.use_dilation"],
        inter_relu=cfg["synth.inter_relu"],
        decomposition=cfg["synth.decomposition"],
        stage_channels=cfg["net.stage_channels"],
        stem_channels=cfg["net.stem_channels"],
    )


def templates_from(cfg: RunConfig):
    from .data import default_benchmark_templates

    return default_benchmark_templates(t=cfg["data.t"], h=cfg["data.h"],
                                       w=cfg["data.w"],
                                       noise_sigma=cfg["data.noise_sigma"])
